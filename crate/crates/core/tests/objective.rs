//! Composite objective checks on a micro model: gradients against central
//! differences, closed-form loss values, stop-gradient and group isolation.

mod common;

use common::micro::{
    self, budget_penalty, micro_batch, micro_config, micro_dims, soft_gates, AT_BUDGET, LEADS, PATCHES, RECORDS,
};
use common::uniform;
use scar_core::model::{Group, Pooling};
use scar_core::training::{GateSource, TrainConfig, Trainer};

#[test]
fn composite_gradients_match_central_differences_with_fixed_gates() {
    let err = micro::fixed_gate_error();
    assert!(err < 1e-4, "worst relative error {err:e}");
}

#[test]
fn masker_gradients_match_central_differences() {
    let err = micro::masker_error();
    assert!(err < 1e-4, "worst relative error {err:e}");
}

#[test]
fn contrastive_loss_is_ln_batch_under_uniform_similarity() {
    assert!(micro::uniform_similarity_gap() < 1e-9);
}

#[test]
fn consistency_of_identical_views_is_zero() {
    assert!(micro::identical_view_consistency().abs() < 1e-12);
}

#[test]
fn budget_penalty_closed_forms() {
    let valid = vec![true; 12];
    let (v, _) = budget_penalty(&AT_BUDGET, &valid);
    assert!(v.abs() < 1e-15);

    // Record means 0.49 and 0.3: ((0.19)² + 0) / 2.
    let mut skewed = AT_BUDGET;
    for g in skewed.iter_mut().take(6) {
        *g = 0.49;
    }
    let (v, grad) = budget_penalty(&skewed, &valid);
    assert!((v - 0.19f64.powi(2) / 2.0).abs() < 1e-15);
    // ∂/∂g_j = 2(mean_r − ρ) / (records · valid cells of r).
    for &d in &grad[..6] {
        assert!((d - 2.0 * 0.19 / (2.0 * 6.0)).abs() < 1e-15);
    }
    for &d in &grad[6..] {
        assert!(d.abs() < 1e-15);
    }

    // Invalid cells drop out of their record's mean.
    let mut holes = valid.clone();
    holes[0] = false;
    holes[1] = false;
    let mut g = AT_BUDGET;
    g[0] = 1.0;
    g[1] = 1.0;
    g[2..6].copy_from_slice(&[0.3, 0.3, 0.3, 0.3]);
    let (v, grad) = budget_penalty(&g, &holes);
    assert!(v.abs() < 1e-15);
    assert_eq!(grad[0], 0.0);
}

#[test]
fn total_is_weighted_sum_of_terms() {
    let (total, masker) = micro::weighted_sum_gaps();
    assert!(total < 1e-12 && masker < 1e-12, "{total:e} {masker:e}");
}

#[test]
fn consistency_sends_no_gradient_into_anchor() {
    let (anchor, partial) = micro::anchor_gradients();
    assert_eq!(anchor, 0.0);
    assert!(partial > 0.0);
}

#[test]
fn masker_step_touches_only_the_masker() {
    let cfg = micro_config(Pooling::Selector);
    let mut tr = Trainer::new(cfg, TrainConfig { batch_size: 2, ..TrainConfig::default() }, micro_dims()).unwrap();
    let batch = micro_batch(&[]);
    let noise = uniform(1, &[RECORDS * LEADS * PATCHES], -0.5, 0.5).into_data();
    let before: Vec<u64> = Group::ALL.iter().map(|&g| tr.params.checksum(g)).collect();
    tr.masker_step(&batch, 0.9, &noise).unwrap();
    let after: Vec<u64> = Group::ALL.iter().map(|&g| tr.params.checksum(g)).collect();
    for (k, g) in Group::ALL.iter().enumerate() {
        assert_eq!(before[k] != after[k], *g == Group::Mask, "{g:?}");
    }
}

#[test]
fn encoder_step_leaves_the_masker_untouched() {
    let cfg = micro_config(Pooling::Selector);
    let mut tr = Trainer::new(cfg, TrainConfig { batch_size: 2, ..TrainConfig::default() }, micro_dims()).unwrap();
    let batch = micro_batch(&[]);
    let gates = soft_gates();
    let before: Vec<u64> = Group::ALL.iter().map(|&g| tr.params.checksum(g)).collect();
    tr.encoder_step(&batch, GateSource::Fixed(&gates)).unwrap();
    let after: Vec<u64> = Group::ALL.iter().map(|&g| tr.params.checksum(g)).collect();
    for (k, g) in Group::ALL.iter().enumerate() {
        assert_eq!(before[k] != after[k], *g != Group::Mask, "{g:?}");
    }
}

#[test]
fn masker_step_raises_disruption_and_encoder_step_lowers_objective() {
    let cfg = micro_config(Pooling::Selector);
    let train = TrainConfig { batch_size: 2, learning_rate: 1e-4, lambda_mask: 0.0, ..TrainConfig::default() };
    let batch = micro_batch(&[]);
    let noise = uniform(7, &[RECORDS * LEADS * PATCHES], -0.5, 0.5).into_data();
    let gates = GateSource::Masker { temperature: 0.9, noise: &noise };
    let disruption = |r: &scar_core::training::StepReport| r.align + train.lambda_cons * r.cons;

    // A record left with one visible cell has a scale-invariant embedding, so
    // the masker gets no gradient there; such trials cannot move either way.
    let (mut moved, mut up, mut down) = (0, 0, 0);
    for seed in 0..40 {
        let mut tr = Trainer::new(cfg.clone(), TrainConfig { seed, ..train.clone() }, micro_dims()).unwrap();
        let b0 = tr.evaluate(&batch, gates).unwrap();
        tr.masker_step(&batch, 0.9, &noise).unwrap();
        let b1 = tr.evaluate(&batch, gates).unwrap();
        tr.encoder_step(&batch, gates).unwrap();
        let b2 = tr.evaluate(&batch, gates).unwrap();
        if (disruption(&b1) - disruption(&b0)).abs() < 1e-12 {
            continue;
        }
        moved += 1;
        up += usize::from(disruption(&b1) > disruption(&b0));
        down += usize::from(disruption(&b2) < disruption(&b1));
    }
    assert!(moved >= 30, "only {moved} informative trials");
    assert!(up as f64 >= 0.9 * moved as f64, "masker raised disruption in {up}/{moved}");
    assert!(down as f64 >= 0.9 * moved as f64, "encoder lowered objective in {down}/{moved}");
}

#[test]
fn heavy_budget_weight_pins_mean_gate() {
    let cfg = micro_config(Pooling::Selector);
    let train = TrainConfig { batch_size: 2, learning_rate: 1e-2, lambda_mask: 1e6, ..TrainConfig::default() };
    let mut tr = Trainer::new(cfg.clone(), train, micro_dims()).unwrap();
    let batch = micro_batch(&[]);
    let noise = vec![0.0; RECORDS * LEADS * PATCHES];
    for _ in 0..400 {
        tr.masker_step(&batch, 1.0, &noise).unwrap();
    }
    let r = tr.evaluate(&batch, GateSource::Masker { temperature: 1.0, noise: &noise }).unwrap();
    assert!((r.mean_gate - cfg.budget).abs() < 0.01, "mean gate {}", r.mean_gate);
}
