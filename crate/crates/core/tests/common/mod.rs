//! Oracles shared by the integration tests and the acceptance suite.
//!
//! The finite-difference oracle only evaluates the forward pass, so it stays
//! independent of the backward rules it is used to check.
#![allow(dead_code)]

pub mod micro;
pub mod ops;
pub mod oracles;

use scar_core::{NodeId, Result, Tape, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// Relative error used by every gradient check: `|a − n| / max(|a|, |n|)`,
/// treating pairs that are both below `1e-8` in magnitude as equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        return 0.0;
    }
    (analytic - numeric).abs() / scale
}

/// Compares analytic gradients of `build` against central differences.
///
/// `build` receives a fresh tape and the leaf ids for `inputs` (all created
/// with `requires_grad = true`) and returns the scalar root. Returns the
/// worst elementwise relative error.
pub fn max_grad_error<F>(inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let root = build(&mut tape, &ids)?;
        Ok(tape.value(root).item())
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &ids)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| tape.grad(id)).collect();

    let mut worst: f64 = 0.0;
    let mut vals = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..vals[i].numel() {
            let orig = vals[i].data()[j];
            vals[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&vals)?;
            vals[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&vals)?;
            vals[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grad.data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Deterministic uniform values in `[lo, hi)` from a small LCG, so the
/// oracle does not depend on the library's RNG plumbing.
pub fn uniform(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let u = (state >> 11) as f64 / (1u64 << 53) as f64;
            lo + (hi - lo) * u
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}
