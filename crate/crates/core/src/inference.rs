//! Test-time path: no masker, the selector pools whatever cells are valid,
//! and classes are scored by cosine against encoded class prompts.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmrs::macro_auroc;
use crate::corpus::{class_prompt, CorpusConfig, SignalRecord};
use crate::error::{Error, Result};
use crate::graph::{cosine, Tape};
use crate::model::{
    encode_report, encode_tokens, mean_pool, select_and_pool, BatchInput, ModelConfig, Pooling,
    ScarParams,
};
use crate::tokenizer::{patchify, TokenGrid};

/// Records per forward pass when embedding many at once.
const CHUNK: usize = 32;

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < crate::graph::NORM_EPS {
        return Err(Error::DegenerateVector(n));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Unit-norm class-prompt embeddings, computed once per evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub embeddings: Vec<Vec<f64>>,
}

impl PromptBank {
    pub fn new(params: &ScarParams, corpus: &CorpusConfig) -> Result<Self> {
        let prompts = (0..corpus.num_classes)
            .map(|k| class_prompt(k, corpus))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[usize]> = prompts.iter().map(|p| p.as_slice()).collect();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, &[]);
        let u = encode_report(&mut tape, &bound, &refs, corpus.vocab_size)?;
        let uv = tape.value(u);
        let embeddings = (0..prompts.len())
            .map(|k| normalized(uv.row(k)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { embeddings })
    }

    pub fn num_classes(&self) -> usize {
        self.embeddings.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Cosine similarity to each class prompt.
    pub scores: Vec<f64>,
    /// `sigmoid(score / τ)`.
    pub probabilities: Vec<f64>,
}

impl Prediction {
    pub fn from_scores(scores: Vec<f64>, temperature: f64) -> Self {
        let probabilities = scores
            .iter()
            .map(|s| 1.0 / (1.0 + (-s / temperature).exp()))
            .collect();
        Self {
            scores,
            probabilities,
        }
    }

    pub fn argmax(&self) -> usize {
        self.scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(k, _)| k)
            .unwrap_or(0)
    }
}

/// Inference-path embeddings `z` (not normalized) of a set of lattices.
pub fn embed_grids(params: &ScarParams, model: &ModelConfig, grids: &[TokenGrid]) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<Result<Vec<Vec<f64>>>> = grids
        .par_chunks(CHUNK)
        .map(|chunk| {
            let refs: Vec<&TokenGrid> = chunk.iter().collect();
            let input = BatchInput::new(&refs)?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, &[]);
            let h = encode_tokens(&mut tape, &bound, &input)?;
            let z = match model.pooling {
                Pooling::Selector => {
                    select_and_pool(&mut tape, &bound, h, &input.valid, input.records, input.cells)?.1
                }
                Pooling::Mean => mean_pool(&mut tape, h, &input.valid, input.records, input.cells)?.1,
            };
            let zv = tape.value(z);
            Ok((0..input.records).map(|r| zv.row(r).to_vec()).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(grids.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub fn embed_records(
    params: &ScarParams,
    model: &ModelConfig,
    records: &[SignalRecord],
    patch_length: usize,
) -> Result<Vec<Vec<f64>>> {
    let grids = records
        .iter()
        .map(|r| patchify(&r.signal, patch_length))
        .collect::<Result<Vec<_>>>()?;
    embed_grids(params, model, &grids)
}

/// Scores one embedding against the prompt bank.
pub fn score_embedding(z: &[f64], prompts: &PromptBank, temperature: f64) -> Result<Prediction> {
    let scores = prompts
        .embeddings
        .iter()
        .map(|u| cosine(z, u))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prediction::from_scores(scores, temperature))
}

pub fn zero_shot_predict(
    record: &SignalRecord,
    params: &ScarParams,
    model: &ModelConfig,
    prompts: &PromptBank,
    patch_length: usize,
) -> Result<Prediction> {
    let z = embed_records(params, model, std::slice::from_ref(record), patch_length)?;
    score_embedding(&z[0], prompts, model.temperature)
}

pub fn zero_shot_batch(
    params: &ScarParams,
    model: &ModelConfig,
    prompts: &PromptBank,
    records: &[SignalRecord],
    patch_length: usize,
) -> Result<Vec<Prediction>> {
    embed_records(params, model, records, patch_length)?
        .iter()
        .map(|z| score_embedding(z, prompts, model.temperature))
        .collect()
}

pub fn zero_shot_auroc(
    params: &ScarParams,
    model: &ModelConfig,
    prompts: &PromptBank,
    records: &[SignalRecord],
    patch_length: usize,
) -> Result<f64> {
    let preds = zero_shot_batch(params, model, prompts, records, patch_length)?;
    let scores: Vec<Vec<f64>> = preds.into_iter().map(|p| p.scores).collect();
    let labels: Vec<Vec<u8>> = records.iter().map(|r| r.labels.clone()).collect();
    macro_auroc(&scores, &labels)
}

/// Fraction of records whose top-scored class is one of their positives.
pub fn top1_accuracy(preds: &[Prediction], records: &[SignalRecord]) -> f64 {
    let hits = preds
        .iter()
        .zip(records)
        .filter(|(p, r)| r.labels.get(p.argmax()) == Some(&1))
        .count();
    hits as f64 / preds.len().max(1) as f64
}

/// A trained model bundled with what it needs to predict.
pub struct ZeroShotModel {
    pub params: ScarParams,
    pub model: ModelConfig,
    pub prompts: PromptBank,
    pub patch_length: usize,
}

impl ZeroShotModel {
    pub fn new(params: ScarParams, model: ModelConfig, corpus: &CorpusConfig) -> Result<Self> {
        let prompts = PromptBank::new(&params, corpus)?;
        Ok(Self {
            params,
            model,
            prompts,
            patch_length: corpus.patch_length,
        })
    }

    pub fn predict(&self, records: &[SignalRecord]) -> Result<Vec<Prediction>> {
        zero_shot_batch(&self.params, &self.model, &self.prompts, records, self.patch_length)
    }
}

// ------------------------------------------------------ prediction dump

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub record_id: String,
    pub mask_id: String,
    pub scores: Vec<f64>,
}

pub fn prediction_csv(rows: &[PredictionRow]) -> String {
    let k = rows.first().map(|r| r.scores.len()).unwrap_or(0);
    let mut out = String::from("record_id,mask_id");
    for c in 0..k {
        out.push_str(&format!(",score_{c}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&r.record_id);
        out.push(',');
        out.push_str(&r.mask_id);
        for s in &r.scores {
            out.push_str(&format!(",{s}"));
        }
        out.push('\n');
    }
    out
}

// --------------------------------------------------------- linear probe

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub fractions: Vec<f64>,
    pub max_epochs: usize,
    pub learning_rate: f64,
    /// Stop once every gradient entry is below this.
    pub tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.01, 0.1, 1.0],
            max_epochs: 500,
            learning_rate: 0.05,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub fraction: f64,
    pub train_records: usize,
    pub auroc: Option<f64>,
    /// Classes whose training subset lacked positives or negatives.
    pub skipped_classes: Vec<usize>,
}

/// Class-stratified subset: records are grouped by their first positive
/// class and each group contributes `ceil(fraction · size)` records.
pub fn stratified_subset(records: &[SignalRecord], fraction: f64, seed: u64) -> Vec<usize> {
    let k = records.first().map(|r| r.labels.len()).unwrap_or(0);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k + 1];
    for (i, r) in records.iter().enumerate() {
        let g = r.positives().next().unwrap_or(k);
        groups[g].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for g in groups.iter_mut().filter(|g| !g.is_empty()) {
        g.shuffle(&mut rng);
        let take = ((fraction * g.len() as f64).ceil() as usize).clamp(1, g.len());
        out.extend_from_slice(&g[..take]);
    }
    out.sort_unstable();
    out
}

/// One-vs-rest logistic regression on fixed features, full-batch Adam.
/// Returns `(weights [K][d], biases [K])`.
pub fn fit_logistic(
    features: &[Vec<f64>],
    labels: &[Vec<u8>],
    cfg: &ProbeConfig,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = features.len();
    let d = features.first().map(|f| f.len()).unwrap_or(0);
    let k = labels.first().map(|l| l.len()).unwrap_or(0);
    let dim = d + 1;
    let mut theta = vec![vec![0.0; dim]; k];
    let mut m = vec![vec![0.0; dim]; k];
    let mut v = vec![vec![0.0; dim]; k];
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    for t in 1..=cfg.max_epochs {
        let mut max_grad = 0.0f64;
        for c in 0..k {
            let mut grad = vec![0.0; dim];
            for (x, y) in features.iter().zip(labels) {
                let logit: f64 = theta[c][d] + x.iter().zip(&theta[c]).map(|(a, w)| a * w).sum::<f64>();
                let err = 1.0 / (1.0 + (-logit).exp()) - y[c] as f64;
                for j in 0..d {
                    grad[j] += err * x[j];
                }
                grad[d] += err;
            }
            for j in 0..dim {
                let g = grad[j] / n as f64;
                max_grad = max_grad.max(g.abs());
                m[c][j] = b1 * m[c][j] + (1.0 - b1) * g;
                v[c][j] = b2 * v[c][j] + (1.0 - b2) * g * g;
                let mh = m[c][j] / (1.0 - b1.powi(t as i32));
                let vh = v[c][j] / (1.0 - b2.powi(t as i32));
                theta[c][j] -= cfg.learning_rate * mh / (vh.sqrt() + eps);
            }
        }
        if max_grad < cfg.tolerance {
            break;
        }
    }
    let biases = theta.iter().map(|t| t[d]).collect();
    let weights = theta.into_iter().map(|mut t| {
        t.truncate(d);
        t
    });
    (weights.collect(), biases)
}

/// Frozen-encoder linear probing: fits a fresh logistic head on a stratified
/// fraction of `train` and reports test macro-AUROC for each fraction.
pub fn linear_probe(
    params: &ScarParams,
    model: &ModelConfig,
    train: &[SignalRecord],
    test: &[SignalRecord],
    patch_length: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<ProbeResult>> {
    let norm = |zs: Vec<Vec<f64>>| zs.iter().map(|z| normalized(z)).collect::<Result<Vec<_>>>();
    let train_z = norm(embed_records(params, model, train, patch_length)?)?;
    let test_z = norm(embed_records(params, model, test, patch_length)?)?;
    let test_labels: Vec<Vec<u8>> = test.iter().map(|r| r.labels.clone()).collect();
    let mut out = Vec::with_capacity(cfg.fractions.len());
    for &fraction in &cfg.fractions {
        let subset = stratified_subset(train, fraction, seed);
        let feats: Vec<Vec<f64>> = subset.iter().map(|&i| train_z[i].clone()).collect();
        let labels: Vec<Vec<u8>> = subset.iter().map(|&i| train[i].labels.clone()).collect();
        let k = labels.first().map(|l| l.len()).unwrap_or(0);
        let skipped: Vec<usize> = (0..k)
            .filter(|&c| {
                let pos = labels.iter().filter(|l| l[c] == 1).count();
                pos == 0 || pos == labels.len()
            })
            .collect();
        for c in &skipped {
            log::warn!("probe fraction {fraction}: class {c} has a single label value, skipped");
        }
        let (w, b) = fit_logistic(&feats, &labels, cfg);
        let kept: Vec<usize> = (0..k).filter(|c| !skipped.contains(c)).collect();
        let scores: Vec<Vec<f64>> = test_z
            .iter()
            .map(|z| {
                kept.iter()
                    .map(|&c| b[c] + z.iter().zip(&w[c]).map(|(a, x)| a * x).sum::<f64>())
                    .collect()
            })
            .collect();
        let labels_kept: Vec<Vec<u8>> = test_labels
            .iter()
            .map(|l| kept.iter().map(|&c| l[c]).collect())
            .collect();
        let auroc = if kept.is_empty() {
            None
        } else {
            macro_auroc(&scores, &labels_kept).ok()
        };
        out.push(ProbeResult {
            fraction,
            train_records: subset.len(),
            auroc,
            skipped_classes: skipped,
        });
    }
    Ok(out)
}

// ------------------------------------------------- selector diagnostics

/// Selector weights `α` over a lattice with the given visible cells.
pub fn selector_weights(params: &ScarParams, grid: &TokenGrid, visible: &[bool]) -> Result<Vec<f64>> {
    let input = BatchInput::new(&[grid])?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, &[]);
    let h = encode_tokens(&mut tape, &bound, &input)?;
    let (alpha, _) = select_and_pool(&mut tape, &bound, h, visible, 1, input.cells)?;
    Ok(tape.value(alpha).data().to_vec())
}

/// Masker logits per cell of a lattice.
pub fn masker_logits(params: &ScarParams, grid: &TokenGrid) -> Result<Vec<f64>> {
    let input = BatchInput::new(&[grid])?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, &[]);
    let h = encode_tokens(&mut tape, &bound, &input)?;
    let l = crate::model::mask_logits(&mut tape, &bound, h)?;
    Ok(tape.value(l).data().to_vec())
}
