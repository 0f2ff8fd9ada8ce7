//! Signal → spatio-temporal token lattice, and lead-order canonicalization.

use crate::corpus::Signal;
use crate::error::{Error, Result};

/// Canonical lead order used everywhere downstream.
pub const CANONICAL_LEADS: [&str; 12] = [
    "I", "II", "III", "aVR", "aVF", "aVL", "V1", "V2", "V3", "V4", "V5", "V6",
];

/// Patches of every lead, `L × S × patch_length` row-major, plus the
/// validity flag of each cell.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub leads: usize,
    pub patches: usize,
    pub patch_length: usize,
    pub data: Vec<f64>,
    pub lead_order: Vec<usize>,
    /// `false` where every sample of the patch carries the missing flag.
    pub cell_valid: Vec<bool>,
}

impl TokenGrid {
    pub fn num_cells(&self) -> usize {
        self.leads * self.patches
    }

    pub fn cell_index(&self, lead: usize, patch: usize) -> usize {
        lead * self.patches + patch
    }

    pub fn patch(&self, lead: usize, patch: usize) -> &[f64] {
        let start = self.cell_index(lead, patch) * self.patch_length;
        &self.data[start..start + self.patch_length]
    }

    pub fn valid_count(&self) -> usize {
        self.cell_valid.iter().filter(|&&v| v).count()
    }
}

pub fn patchify(signal: &Signal, patch_length: usize) -> Result<TokenGrid> {
    if patch_length == 0 || !signal.samples.is_multiple_of(patch_length) {
        return Err(Error::Tokenization(format!(
            "signal length {} is not divisible by patch length {patch_length}",
            signal.samples
        )));
    }
    let patches = signal.samples / patch_length;
    let cells = signal.leads * patches;
    // a lead row is contiguous and its patches are consecutive slices of it,
    // so the lattice shares the signal's row-major layout
    let mut data = signal.data.clone();
    let mut cell_valid = vec![true; cells];
    if let Some(missing) = &signal.missing {
        for (cell, valid) in cell_valid.iter_mut().enumerate() {
            let span = &missing[cell * patch_length..(cell + 1) * patch_length];
            *valid = !span.iter().all(|&m| m);
        }
        for (v, &m) in data.iter_mut().zip(missing) {
            if m {
                *v = 0.0;
            }
        }
    }
    Ok(TokenGrid {
        leads: signal.leads,
        patches,
        patch_length,
        data,
        lead_order: (0..signal.leads).collect(),
        cell_valid,
    })
}

/// Inverse of [`patchify`] on the sample values.
pub fn unpatchify(grid: &TokenGrid) -> Signal {
    Signal::new(grid.leads, grid.patches * grid.patch_length, grid.data.clone())
        .expect("grid holds L*S*P samples")
}

/// Reorders rows so that row `i` holds canonical lead `i`.
pub fn canonicalize_leads<S: AsRef<str>>(signal: &Signal, source_order: &[S]) -> Result<Signal> {
    if source_order.len() != signal.leads || signal.leads != CANONICAL_LEADS.len() {
        return Err(Error::Format(format!(
            "expected {} named leads, got {} names for {} rows",
            CANONICAL_LEADS.len(),
            source_order.len(),
            signal.leads
        )));
    }
    let mut source_row = [usize::MAX; 12];
    for (row, name) in source_order.iter().enumerate() {
        let name = name.as_ref();
        let canon = CANONICAL_LEADS
            .iter()
            .position(|c| c.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Format(format!("unknown lead name {name:?}")))?;
        if source_row[canon] != usize::MAX {
            return Err(Error::Format(format!("lead {name:?} listed twice")));
        }
        source_row[canon] = row;
    }
    let c = signal.samples;
    let mut data = Vec::with_capacity(signal.data.len());
    let mut missing = signal.missing.as_ref().map(|_| Vec::with_capacity(signal.data.len()));
    for &row in &source_row {
        data.extend_from_slice(&signal.data[row * c..(row + 1) * c]);
        if let (Some(out), Some(src)) = (missing.as_mut(), signal.missing.as_ref()) {
            out.extend_from_slice(&src[row * c..(row + 1) * c]);
        }
    }
    Ok(Signal {
        leads: signal.leads,
        samples: c,
        data,
        missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_small_case() {
        let s = Signal::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = patchify(&s, 2).unwrap();
        assert_eq!(g.patches, 2);
        assert_eq!(g.patch(0, 0), &[1.0, 2.0]);
        assert_eq!(g.patch(0, 1), &[3.0, 4.0]);
        assert!(matches!(patchify(&s, 3), Err(Error::Tokenization(_))));
    }

    #[test]
    fn round_trip_random_signal() {
        let data: Vec<f64> = (0..12 * 500).map(|i| ((i * 7919) % 1000) as f64 / 999.0).collect();
        let s = Signal::new(12, 500, data).unwrap();
        let g = patchify(&s, 50).unwrap();
        assert_eq!(g.leads * g.patches * g.patch_length, 12 * 500);
        assert_eq!(unpatchify(&g), s);
    }

    #[test]
    fn missing_lead_marks_cells_invalid() {
        let mut s = Signal::new(2, 6, vec![0.5; 12]).unwrap();
        let mut missing = vec![false; 12];
        missing[..6].iter_mut().for_each(|m| *m = true);
        // a single missing sample keeps its patch valid
        missing[7] = true;
        s.missing = Some(missing);
        let g = patchify(&s, 3).unwrap();
        assert_eq!(g.cell_valid, vec![false, false, true, true]);
        assert_eq!(g.valid_count(), 4 - 2);
        assert_eq!(g.patch(0, 0), &[0.0; 3]);
        assert_eq!(g.patch(1, 0), &[0.5, 0.0, 0.5]);

        // genuine zeros without the flag stay valid
        let z = Signal::new(1, 4, vec![0.0; 4]).unwrap();
        assert_eq!(patchify(&z, 2).unwrap().cell_valid, vec![true, true]);
    }

    #[test]
    fn canonicalization() {
        let data: Vec<f64> = (0..12 * 3).map(|i| i as f64).collect();
        let s = Signal::new(12, 3, data).unwrap();
        assert_eq!(canonicalize_leads(&s, &CANONICAL_LEADS).unwrap(), s);

        let reversed: Vec<&str> = CANONICAL_LEADS.iter().rev().copied().collect();
        let mut rev = s.clone();
        rev.data = (0..12).rev().flat_map(|l| s.lead(l).to_vec()).collect();
        let once = canonicalize_leads(&rev, &reversed).unwrap();
        assert_eq!(once, s);
        assert_eq!(canonicalize_leads(&once, &CANONICAL_LEADS).unwrap(), once);

        let mut bad = CANONICAL_LEADS.to_vec();
        bad[3] = "aVX";
        assert!(matches!(canonicalize_leads(&s, &bad), Err(Error::Format(_))));
    }
}
