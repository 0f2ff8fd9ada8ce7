//! Evaluation-time and augmentation-time corruption: lead dropout, temporal
//! span dropout, their joint application, and Hard selection by impact.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::corpus::SignalRecord;
use crate::error::{Error, Result};

/// Candidates of one Hard selection must agree on budget to this tolerance.
pub const BUDGET_MATCH_TOL: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    LeadOnly,
    TemporalOnly,
    Joint,
}

impl MaskKind {
    pub const ALL: [MaskKind; 3] = [MaskKind::LeadOnly, MaskKind::TemporalOnly, MaskKind::Joint];

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::LeadOnly => "lead_only",
            MaskKind::TemporalOnly => "temporal_only",
            MaskKind::Joint => "joint",
        }
    }

    fn drops_leads(self) -> bool {
        matches!(self, MaskKind::LeadOnly | MaskKind::Joint)
    }

    fn drops_spans(self) -> bool {
        matches!(self, MaskKind::TemporalOnly | MaskKind::Joint)
    }
}

impl std::str::FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mask kind {s:?}")))
    }
}

/// Sampling parameters for random masks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub lead_drop_prob: f64,
    pub span_ratio_range: (f64, f64),
}

impl MaskConfig {
    /// Test-time missingness.
    pub const EVAL: MaskConfig = MaskConfig {
        lead_drop_prob: 0.1,
        span_ratio_range: (0.05, 0.20),
    };

    /// Training-time augmentation.
    pub const PRETRAIN: MaskConfig = MaskConfig {
        lead_drop_prob: 0.2,
        span_ratio_range: (0.05, 0.10),
    };

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.span_ratio_range;
        if !(0.0..=1.0).contains(&self.lead_drop_prob) || !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("invalid mask config {self:?}")));
        }
        Ok(())
    }
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self::EVAL
    }
}

/// Geometry of the lattice a mask applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskGeometry {
    pub leads: usize,
    pub samples: usize,
    pub patch_length: usize,
}

impl MaskGeometry {
    pub fn patches(&self) -> usize {
        self.samples / self.patch_length
    }

    pub fn cells(&self) -> usize {
        self.leads * self.patches()
    }
}

/// Half-open sample range `[start, end)` on one lead.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub lead: usize,
    pub start: usize,
    pub end: usize,
}

/// A missingness pattern. `cells` marks fully missing cells (true = missing);
/// `budget_fraction` is the masked share of all samples, so partially
/// covered patches count proportionally.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub seed: u64,
    pub geometry: MaskGeometry,
    pub dropped_leads: Vec<usize>,
    pub spans: Vec<Span>,
    /// Cell un-masked by the keep-one guard, if it fired.
    pub restored_cell: Option<(usize, usize)>,
    cells: Vec<bool>,
    budget_fraction: f64,
}

impl MaskSpec {
    pub fn from_parts(
        kind: MaskKind,
        seed: u64,
        geometry: MaskGeometry,
        dropped_leads: Vec<usize>,
        spans: Vec<Span>,
        restored_cell: Option<(usize, usize)>,
    ) -> Result<Self> {
        if geometry.patch_length == 0 || !geometry.samples.is_multiple_of(geometry.patch_length) {
            return Err(Error::Config(format!("invalid mask geometry {geometry:?}")));
        }
        if dropped_leads.iter().any(|&l| l >= geometry.leads)
            || spans
                .iter()
                .any(|s| s.lead >= geometry.leads || s.start > s.end || s.end > geometry.samples)
        {
            return Err(Error::Dimension("mask parts fall outside the lattice".into()));
        }
        let mut spec = Self {
            kind,
            seed,
            geometry,
            dropped_leads,
            spans,
            restored_cell,
            cells: Vec::new(),
            budget_fraction: 0.0,
        };
        let samples = spec.sample_mask();
        spec.budget_fraction =
            samples.iter().filter(|&&m| m).count() as f64 / samples.len().max(1) as f64;
        let p = geometry.patch_length;
        spec.cells = samples.chunks(p).map(|c| c.iter().all(|&m| m)).collect();
        Ok(spec)
    }

    pub fn empty(kind: MaskKind, geometry: MaskGeometry) -> Self {
        Self::from_parts(kind, 0, geometry, Vec::new(), Vec::new(), None)
            .expect("empty mask is always valid")
    }

    /// Per-sample missing flags, `L × C` row-major.
    pub fn sample_mask(&self) -> Vec<bool> {
        let g = self.geometry;
        let mut out = vec![false; g.leads * g.samples];
        for &l in &self.dropped_leads {
            out[l * g.samples..(l + 1) * g.samples].iter_mut().for_each(|m| *m = true);
        }
        for s in &self.spans {
            out[s.lead * g.samples + s.start..s.lead * g.samples + s.end]
                .iter_mut()
                .for_each(|m| *m = true);
        }
        if let Some((l, p)) = self.restored_cell {
            let start = l * g.samples + p * g.patch_length;
            out[start..start + g.patch_length].iter_mut().for_each(|m| *m = false);
        }
        out
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn masked_cell_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn budget_fraction(&self) -> f64 {
        self.budget_fraction
    }

    pub fn is_empty(&self) -> bool {
        self.budget_fraction == 0.0
    }

    /// Stable identifier for ledgers and dumps.
    pub fn id(&self) -> String {
        format!("{}-{:016x}", self.kind.name(), self.seed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Serialize, Deserialize)]
struct MaskRepr {
    kind: MaskKind,
    seed: u64,
    geometry: MaskGeometry,
    dropped_leads: Vec<usize>,
    spans: Vec<Span>,
    #[serde(default)]
    restored_cell: Option<(usize, usize)>,
    cells: Vec<(usize, usize)>,
    budget_fraction: f64,
}

impl Serialize for MaskSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let patches = self.geometry.patches();
        MaskRepr {
            kind: self.kind,
            seed: self.seed,
            geometry: self.geometry,
            dropped_leads: self.dropped_leads.clone(),
            spans: self.spans.clone(),
            restored_cell: self.restored_cell,
            cells: self
                .cells
                .iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(|(i, _)| (i / patches, i % patches))
                .collect(),
            budget_fraction: self.budget_fraction,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MaskSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = MaskRepr::deserialize(d)?;
        let spec = MaskSpec::from_parts(
            r.kind,
            r.seed,
            r.geometry,
            r.dropped_leads,
            r.spans,
            r.restored_cell,
        )
        .map_err(D::Error::custom)?;
        let patches = spec.geometry.patches();
        let listed: Vec<(usize, usize)> = spec
            .cells
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| (i / patches, i % patches))
            .collect();
        if listed != r.cells {
            return Err(D::Error::custom("cell list disagrees with leads/spans"));
        }
        Ok(spec)
    }
}

fn span_len(ratio: f64, samples: usize) -> usize {
    ((ratio * samples as f64).round() as usize).min(samples)
}

fn random_span(lead: usize, len: usize, samples: usize, rng: &mut impl Rng) -> Span {
    let start = rng.gen_range(0..=samples - len);
    Span {
        lead,
        start,
        end: start + len,
    }
}

/// Draws a random mask; never masks every cell (the keep-one guard restores
/// one uniformly chosen cell and logs the event).
pub fn sample_random_mask(
    kind: MaskKind,
    cfg: &MaskConfig,
    geometry: MaskGeometry,
    seed: u64,
) -> Result<MaskSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropped = Vec::new();
    if kind.drops_leads() {
        for l in 0..geometry.leads {
            if rng.gen_bool(cfg.lead_drop_prob) {
                dropped.push(l);
            }
        }
    }
    let mut spans = Vec::new();
    if kind.drops_spans() {
        let (lo, hi) = cfg.span_ratio_range;
        for l in 0..geometry.leads {
            let ratio = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            let len = span_len(ratio, geometry.samples);
            if len > 0 && !dropped.contains(&l) {
                spans.push(random_span(l, len, geometry.samples, &mut rng));
            }
        }
    }
    let mut spec = MaskSpec::from_parts(kind, seed, geometry, dropped, spans, None)?;
    if spec.masked_cell_count() == geometry.cells() {
        let cell = rng.gen_range(0..geometry.cells());
        let restored = (cell / geometry.patches(), cell % geometry.patches());
        log::warn!(
            "random mask {} covered every cell; restoring cell {restored:?}",
            spec.id()
        );
        spec = MaskSpec::from_parts(
            kind,
            seed,
            geometry,
            spec.dropped_leads,
            spec.spans,
            Some(restored),
        )?;
    }
    Ok(spec)
}

/// Draws a mask of `kind` whose masked-sample fraction matches `budget` up to
/// span rounding. Used to build equal-budget candidate pools.
pub fn sample_budget_mask(
    kind: MaskKind,
    cfg: &MaskConfig,
    geometry: MaskGeometry,
    budget: f64,
    seed: u64,
) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&budget) {
        return Err(Error::Config(format!("budget {budget} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = geometry.leads;
    let c = geometry.samples;
    let (n_leads, per_lead_ratio) = match kind {
        MaskKind::LeadOnly => (((budget * l as f64).round() as usize).min(l - 1), 0.0),
        MaskKind::TemporalOnly => (0, budget),
        MaskKind::Joint => {
            let cap = (budget * l as f64).floor() as usize;
            let drawn = Binomial::new(l as u64, cfg.lead_drop_prob)
                .map_err(|e| Error::Config(e.to_string()))?
                .sample(&mut rng) as usize;
            let n = drawn.min(cap).min(l - 1);
            (n, (budget * l as f64 - n as f64) / (l - n) as f64)
        }
    };
    let dropped: Vec<usize> = {
        let mut v = sample(&mut rng, l, n_leads).into_vec();
        v.sort_unstable();
        v
    };
    let len = span_len(per_lead_ratio, c);
    let spans = if len > 0 {
        (0..l)
            .filter(|lead| !dropped.contains(lead))
            .map(|lead| random_span(lead, len, c, &mut rng))
            .collect()
    } else {
        Vec::new()
    };
    MaskSpec::from_parts(kind, seed, geometry, dropped, spans, None)
}

/// Zeroes the masked samples and raises their missing flags. Flags already
/// present on the record are kept.
pub fn apply_mask(record: &SignalRecord, mask: &MaskSpec) -> Result<SignalRecord> {
    let g = mask.geometry;
    if record.signal.leads != g.leads || record.signal.samples != g.samples {
        return Err(Error::Dimension(format!(
            "mask for {}x{} applied to a {}x{} signal",
            g.leads, g.samples, record.signal.leads, record.signal.samples
        )));
    }
    let mut out = record.clone();
    let masked = mask.sample_mask();
    let flags = out
        .signal
        .missing
        .get_or_insert_with(|| vec![false; g.leads * g.samples]);
    for ((v, f), &m) in out.signal.data.iter_mut().zip(flags.iter_mut()).zip(&masked) {
        if m {
            *v = 0.0;
            *f = true;
        }
    }
    Ok(out)
}

/// Training-time augmentation: a joint mask drawn with `cfg`, applied.
pub fn pretrain_augment(
    record: &SignalRecord,
    cfg: &MaskConfig,
    patch_length: usize,
    seed: u64,
) -> Result<SignalRecord> {
    let geometry = MaskGeometry {
        leads: record.signal.leads,
        samples: record.signal.samples,
        patch_length,
    };
    let mask = sample_random_mask(MaskKind::Joint, cfg, geometry, seed)?;
    if mask.is_empty() {
        return Ok(record.clone());
    }
    apply_mask(record, &mask)
}

/// Anything that can score the semantic impact of a mask on a record.
pub trait ImpactOracle {
    fn impact(&self, record: &SignalRecord, mask: &MaskSpec) -> Result<f64>;
}

/// Picks the candidate with the largest impact; ties go to the lowest index.
/// Returns the chosen index.
pub fn select_hard_mask(
    record: &SignalRecord,
    candidates: &[MaskSpec],
    reference: Option<&dyn ImpactOracle>,
) -> Result<usize> {
    let reference = reference
        .ok_or_else(|| Error::Dependency("Hard selection needs a reference model".into()))?;
    let first = candidates
        .first()
        .ok_or_else(|| Error::Input("no candidate masks".into()))?;
    for c in candidates {
        if c.kind != first.kind
            || (c.budget_fraction() - first.budget_fraction()).abs() > BUDGET_MATCH_TOL
        {
            return Err(Error::Input(format!(
                "candidate {} ({}, budget {:.4}) does not match {} ({}, budget {:.4})",
                c.id(),
                c.kind.name(),
                c.budget_fraction(),
                first.id(),
                first.kind.name(),
                first.budget_fraction()
            )));
        }
    }
    let mut best = 0;
    let mut best_impact = f64::NEG_INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let impact = reference.impact(record, c)?;
        if impact > best_impact {
            best = i;
            best_impact = impact;
        }
    }
    Ok(best)
}

/// Candidate pool for Hard selection: the random draw itself first, then
/// `n - 1` budget-matched draws of the same kind.
pub fn hard_candidates(
    random: &MaskSpec,
    cfg: &MaskConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<MaskSpec>> {
    let mut out = Vec::with_capacity(n);
    out.push(random.clone());
    for i in 1..n {
        let s = crate::corpus::mix_seed(seed, &[i as u64]);
        out.push(sample_budget_mask(
            random.kind,
            cfg,
            random.geometry,
            random.budget_fraction(),
            s,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_record, CorpusConfig, Split};

    const GEO: MaskGeometry = MaskGeometry {
        leads: 12,
        samples: 500,
        patch_length: 50,
    };

    #[test]
    fn zero_probabilities_give_empty_mask() {
        let cfg = MaskConfig {
            lead_drop_prob: 0.0,
            span_ratio_range: (0.0, 0.0),
        };
        for kind in MaskKind::ALL {
            let m = sample_random_mask(kind, &cfg, GEO, 3).unwrap();
            assert!(m.is_empty());
            assert_eq!(m.masked_cell_count(), 0);
        }
    }

    #[test]
    fn keep_one_guard_fires() {
        let cfg = MaskConfig {
            lead_drop_prob: 1.0,
            span_ratio_range: (0.0, 0.0),
        };
        let m = sample_random_mask(MaskKind::LeadOnly, &cfg, GEO, 1).unwrap();
        assert!(m.restored_cell.is_some());
        assert_eq!(m.masked_cell_count(), GEO.cells() - 1);
        assert!(m.budget_fraction() < 1.0);
    }

    #[test]
    fn structure_by_kind() {
        for seed in 0..50 {
            let lead = sample_random_mask(MaskKind::LeadOnly, &MaskConfig::EVAL, GEO, seed).unwrap();
            assert!(lead.spans.is_empty());
            for l in 0..12 {
                let row = &lead.cells()[l * 10..(l + 1) * 10];
                assert!(row.iter().all(|&c| c) || row.iter().all(|&c| !c));
            }
            let temp =
                sample_random_mask(MaskKind::TemporalOnly, &MaskConfig::EVAL, GEO, seed).unwrap();
            assert!(temp.dropped_leads.is_empty());
            let sm = temp.sample_mask();
            for l in 0..12 {
                let row = &sm[l * 500..(l + 1) * 500];
                let first = row.iter().position(|&m| m);
                let last = row.iter().rposition(|&m| m);
                if let (Some(a), Some(b)) = (first, last) {
                    assert!(row[a..=b].iter().all(|&m| m), "span must be contiguous");
                    let ratio = (b - a + 1) as f64 / 500.0;
                    assert!((0.05..=0.20).contains(&ratio));
                }
            }
        }
    }

    #[test]
    fn budget_is_exact_sample_fraction() {
        let spans = vec![Span { lead: 1, start: 0, end: 50 }];
        let m = MaskSpec::from_parts(MaskKind::Joint, 0, GEO, vec![0], spans, None).unwrap();
        // one full lead + 50 more samples (disjoint) out of 6000
        assert!((m.budget_fraction() - 550.0 / 6000.0).abs() < 1e-15);
        assert_eq!(m.masked_cell_count(), 11);
    }

    #[test]
    fn budget_matched_masks_hit_target() {
        for kind in MaskKind::ALL {
            for (i, target) in [0.05, 0.1, 0.17, 0.3].into_iter().enumerate() {
                let m = sample_budget_mask(kind, &MaskConfig::EVAL, GEO, target, i as u64).unwrap();
                assert_eq!(m.kind, kind);
                let tol = if kind == MaskKind::LeadOnly { 1.0 / 24.0 } else { 0.005 };
                assert!(
                    (m.budget_fraction() - target).abs() <= tol,
                    "{kind:?} target {target} got {}",
                    m.budget_fraction()
                );
            }
        }
    }

    #[test]
    fn apply_is_idempotent_and_identity_on_empty() {
        let rec = generate_record(&CorpusConfig::default(), Split::Test, 0);
        let empty = MaskSpec::empty(MaskKind::Joint, GEO);
        let same = apply_mask(&rec, &empty).unwrap();
        assert_eq!(same.signal.data, rec.signal.data);
        assert_eq!(same.signal.missing_count(), 0);

        let m = MaskSpec::from_parts(MaskKind::LeadOnly, 0, GEO, vec![4], vec![], None).unwrap();
        let once = apply_mask(&rec, &m).unwrap();
        assert!(once.signal.lead(4).iter().all(|&v| v == 0.0));
        assert_eq!(once.signal.lead(3), rec.signal.lead(3));
        let twice = apply_mask(&once, &m).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn json_replays_exactly() {
        let m = sample_random_mask(MaskKind::Joint, &MaskConfig::EVAL, GEO, 77).unwrap();
        let back = MaskSpec::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        assert_eq!(m.sample_mask(), back.sample_mask());
    }

    struct Table(Vec<f64>);

    impl ImpactOracle for Table {
        fn impact(&self, _r: &SignalRecord, mask: &MaskSpec) -> Result<f64> {
            Ok(self.0[mask.seed as usize])
        }
    }

    #[test]
    fn hard_selection_rules() {
        let rec = generate_record(&CorpusConfig::default(), Split::Test, 1);
        let mk = |seed| {
            MaskSpec::from_parts(MaskKind::LeadOnly, seed, GEO, vec![seed as usize], vec![], None)
                .unwrap()
        };
        let cands: Vec<MaskSpec> = (0..4).map(mk).collect();
        let oracle = Table(vec![0.1, 0.4, 0.4, 0.2]);
        assert_eq!(select_hard_mask(&rec, &cands, Some(&oracle)).unwrap(), 1);
        assert_eq!(select_hard_mask(&rec, &cands[..1], Some(&oracle)).unwrap(), 0);
        assert!(matches!(
            select_hard_mask(&rec, &cands, None),
            Err(Error::Dependency(_))
        ));
        let mut mixed = cands.clone();
        mixed.push(MaskSpec::from_parts(MaskKind::LeadOnly, 0, GEO, vec![0, 1], vec![], None).unwrap());
        assert!(select_hard_mask(&rec, &mixed, Some(&oracle)).is_err());
    }
}
