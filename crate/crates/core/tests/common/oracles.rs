//! Brute-force oracles for ranking metrics and hard-mask selection.

use scar_core::cmrs::{impact, ReferenceModel};
use scar_core::corpus::SignalRecord;
use scar_core::missingness::{apply_mask, MaskSpec};

/// O(n²) pair counting: a positive above a negative scores 1, a tie 1/2.
pub fn pair_count_auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

pub fn pair_count_macro(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Option<f64> {
    let k = labels[0].len();
    let per_class: Vec<f64> = (0..k)
        .filter_map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let l: Vec<u8> = labels.iter().map(|r| r[c]).collect();
            pair_count_auroc(&s, &l)
        })
        .collect();
    (!per_class.is_empty()).then(|| per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Index of the candidate with the largest impact on the reference
/// prediction, evaluated one mask at a time.
pub fn naive_argmax(reference: &ReferenceModel, record: &SignalRecord, pool: &[MaskSpec]) -> usize {
    let p0 = reference.probabilities(std::slice::from_ref(record)).unwrap().remove(0);
    let mut best = (0, f64::NEG_INFINITY);
    for (i, m) in pool.iter().enumerate() {
        let masked = apply_mask(record, m).unwrap();
        let p = reference.probabilities(&[masked]).unwrap().remove(0);
        let v = impact(&p0, &p);
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}
