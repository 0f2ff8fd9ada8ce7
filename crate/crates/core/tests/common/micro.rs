//! Micro model fixtures: two records of a 2-lead, 3-patch grid with a
//! four-dimensional embedding, plus the composite-objective checks built
//! on them.

use scar_core::model::{BatchInput, Group, ModelConfig, ModelDims, Pooling, ScarParams};
use scar_core::tokenizer::TokenGrid;
use scar_core::training::{loss_align, loss_budget, loss_cons, scar_forward, Batch, GateSource, LossWeights};
use scar_core::{Tape, Tensor};

use super::{rel_err, uniform, FD_STEP};

pub const LEADS: usize = 2;
pub const PATCHES: usize = 3;
pub const PATCH_LEN: usize = 4;
pub const RECORDS: usize = 2;
pub const VOCAB: usize = 7;

pub fn micro_config(pooling: Pooling) -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        encoder_hidden: vec![5],
        head_hidden: vec![3],
        text_hidden: 4,
        pooling,
        ..ModelConfig::default()
    }
}

pub fn micro_dims() -> ModelDims {
    ModelDims { patch_length: PATCH_LEN, vocab_size: VOCAB }
}

pub fn micro_batch(valid_holes: &[usize]) -> Batch {
    let cells = LEADS * PATCHES;
    let grids: Vec<TokenGrid> = (0..RECORDS)
        .map(|r| {
            let mut cell_valid = vec![true; cells];
            for &h in valid_holes {
                if h / cells == r {
                    cell_valid[h % cells] = false;
                }
            }
            TokenGrid {
                leads: LEADS,
                patches: PATCHES,
                patch_length: PATCH_LEN,
                data: uniform(11 + r as u64, &[cells * PATCH_LEN], 0.0, 1.0).into_data(),
                lead_order: (0..LEADS).collect(),
                cell_valid,
            }
        })
        .collect();
    let refs: Vec<&TokenGrid> = grids.iter().collect();
    Batch {
        input: BatchInput::new(&refs).unwrap(),
        reports: vec![vec![1, 2, 0, 0], vec![3, 5, 6, 0]],
    }
}

pub fn weights() -> LossWeights {
    LossWeights { lambda_cons: 0.7, lambda_mask: 1.3, masker_ascends_consistency: true }
}

pub fn without_consistency() -> LossWeights {
    LossWeights { lambda_cons: 0.0, ..weights() }
}

#[derive(Clone, Copy)]
pub enum Root {
    Total,
    Masker,
}

pub fn objective(params: &ScarParams, cfg: &ModelConfig, w: LossWeights, batch: &Batch, gates: GateSource<'_>, root: Root) -> f64 {
    let mut tape = Tape::new();
    let f = scar_forward(&mut tape, params, &[], cfg, w, batch, gates).unwrap();
    let id = match root {
        Root::Total => f.total,
        Root::Masker => f.masker_objective,
    };
    tape.value(id).item()
}

/// Worst relative error over every scalar of the parameters in `groups`.
pub fn composite_error(
    cfg: &ModelConfig,
    w: LossWeights,
    batch: &Batch,
    gates: GateSource<'_>,
    groups: &[Group],
    root: Root,
) -> f64 {
    let params = ScarParams::init(cfg, micro_dims(), 5).unwrap();
    let mut tape = Tape::new();
    let f = scar_forward(&mut tape, &params, groups, cfg, w, batch, gates).unwrap();
    let id = match root {
        Root::Total => f.total,
        Root::Masker => f.masker_objective,
    };
    tape.backward(id).unwrap();

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (i, entry) in params.entries.iter().enumerate() {
        if !groups.contains(&entry.group) {
            continue;
        }
        let grad = tape.grad(f.param_ids[i]);
        for j in 0..entry.value.numel() {
            let orig = entry.value.data()[j];
            probe.entries[i].value.data_mut()[j] = orig + FD_STEP;
            let plus = objective(&probe, cfg, w, batch, gates, root);
            probe.entries[i].value.data_mut()[j] = orig - FD_STEP;
            let minus = objective(&probe, cfg, w, batch, gates, root);
            probe.entries[i].value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grad.data()[j], numeric));
        }
    }
    worst
}

pub fn soft_gates() -> Vec<f64> {
    // Kept away from 0.5 so the visible set is stable under perturbation.
    vec![0.1, 0.8, 0.3, 0.2, 0.9, 0.05, 0.7, 0.15, 0.25, 0.95, 0.35, 0.6]
}

/// Worst error of the full objective under fixed gates, for both poolings.
/// Central differences cannot honour the detached anchor, so the encoder is
/// checked without the consistency term and every other group with it.
pub fn fixed_gate_error() -> f64 {
    let gates = soft_gates();
    let mut worst: f64 = 0.0;
    for pooling in [Pooling::Selector, Pooling::Mean] {
        let cfg = micro_config(pooling);
        let batch = micro_batch(&[4]);
        let fixed = GateSource::Fixed(&gates);
        worst = worst.max(composite_error(&cfg, without_consistency(), &batch, fixed, &Group::ALL, Root::Total));
        worst = worst.max(composite_error(&cfg, weights(), &batch, fixed, &[Group::Sel, Group::Text], Root::Total));
    }
    worst
}

/// Worst error of the masker parameters through the Gumbel gates, for both
/// the masker objective and the total.
pub fn masker_error() -> f64 {
    let noise = uniform(3, &[RECORDS * LEADS * PATCHES], -0.5, 0.5).into_data();
    let cfg = micro_config(Pooling::Selector);
    let batch = micro_batch(&[]);
    let gates = GateSource::Masker { temperature: 0.8, noise: &noise };
    [Root::Masker, Root::Total]
        .into_iter()
        .map(|root| composite_error(&cfg, weights(), &batch, gates, &[Group::Mask], root))
        .fold(0.0, f64::max)
}

/// Largest `|L_align − ln B|` over batch sizes when every pair is equally
/// similar.
pub fn uniform_similarity_gap() -> f64 {
    [2usize, 3, 8, 16]
        .into_iter()
        .map(|b| {
            let mut tape = Tape::new();
            let z = tape.param(Tensor::matrix(b, 3, [0.3, -1.2, 2.0].repeat(b)).unwrap());
            let u = tape.param(Tensor::matrix(b, 3, [1.0, 0.5, -0.25].repeat(b)).unwrap());
            let l = loss_align(&mut tape, z, u, 0.07).unwrap();
            (tape.value(l).item() - (b as f64).ln()).abs()
        })
        .fold(0.0, f64::max)
}

/// Consistency loss between identical views.
pub fn identical_view_consistency() -> f64 {
    let mut tape = Tape::new();
    let z = uniform(8, &[4, 6], -1.0, 1.0);
    let a = tape.param(z.clone());
    let b = tape.param(z);
    let l = loss_cons(&mut tape, a, b).unwrap();
    tape.value(l).item()
}

/// Budget penalty and gradient for two records of six cells at budget 0.3.
pub fn budget_penalty(gates: &[f64], valid: &[bool]) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let id = tape.param(Tensor::vector(gates.to_vec()));
    let l = loss_budget(&mut tape, id, valid, 2, 6, 0.3).unwrap();
    tape.backward(l).unwrap();
    (tape.value(l).item(), tape.grad(id).into_data())
}

/// Gates whose per-record means both sit exactly at 0.3.
pub const AT_BUDGET: [f64; 12] = [0.0, 0.6, 0.3, 0.3, 0.5, 0.1, 0.2, 0.4, 0.3, 0.3, 0.3, 0.3];

/// `(|total − Σ weighted terms|, |masker objective − its weighted form|)`.
pub fn weighted_sum_gaps() -> (f64, f64) {
    let gates = soft_gates();
    let cfg = micro_config(Pooling::Selector);
    let params = ScarParams::init(&cfg, micro_dims(), 2).unwrap();
    let batch = micro_batch(&[]);
    let mut tape = Tape::new();
    let w = weights();
    let f = scar_forward(&mut tape, &params, &[], &cfg, w, &batch, GateSource::Fixed(&gates)).unwrap();
    let v = |id| tape.value(id).item();
    let total = v(f.align) + w.lambda_cons * v(f.cons) + w.lambda_mask * v(f.budget);
    let masker = -(v(f.align) + w.lambda_cons * v(f.cons)) + w.lambda_mask * v(f.budget);
    ((v(f.total) - total).abs(), (v(f.masker_objective) - masker).abs())
}

/// Gradients of the consistency loss reaching the anchor branch's weights
/// and the partial view: `(anchor max |g|, partial max |g|)`.
pub fn anchor_gradients() -> (f64, f64) {
    let mut tape = Tape::new();
    let w = tape.param(uniform(4, &[3, 5], -1.0, 1.0));
    let x = tape.constant(uniform(5, &[4, 3], -1.0, 1.0));
    let anchor = tape.matmul(x, w).unwrap();
    let partial = tape.param(uniform(6, &[4, 5], -1.0, 1.0));
    let l = loss_cons(&mut tape, partial, anchor).unwrap();
    tape.backward(l).unwrap();
    let max = |t: Tensor| t.data().iter().fold(0.0f64, |m, g| m.max(g.abs()));
    (max(tape.grad(w)), max(tape.grad(partial)))
}
