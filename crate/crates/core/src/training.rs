//! Losses and the alternating min–max optimization.
//!
//! Each batch gets one masker step (ascend alignment + consistency, descend
//! the budget penalty) and one encoder-side step (descend alignment +
//! consistency with gates held fixed). Gates always read `sg(H)`, so the
//! encoder-side step sees them as constants and the masker step, where the
//! encoder is frozen anyway, is unaffected.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{mix_seed, Corpus, SignalRecord};
use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::inference::{zero_shot_auroc, PromptBank};
use crate::missingness::{pretrain_augment, MaskConfig};
use crate::model::{
    adversarial_gates, encode_report, encode_tokens, full_view_embed, gumbel_noise, mask_tokens,
    mean_pool, select_and_pool, BatchInput, Group, ModelConfig, ModelDims, Pooling, ScarParams,
};
use crate::tensor::Tensor;
use crate::tokenizer::patchify;

const TAG_INIT: u64 = 0x1;
const TAG_SHUFFLE: u64 = 0x2;
const TAG_AUGMENT: u64 = 0x3;
const TAG_NOISE: u64 = 0x4;
const TAG_RANDOM_GATES: u64 = 0x5;

/// Where the training-time missingness comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Masking {
    #[default]
    Adversarial,
    /// Exactly `round(ρ·|valid|)` uniformly drawn valid cells, binary gates.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_cons: f64,
    pub lambda_mask: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub masker_steps: usize,
    pub encoder_steps: usize,
    /// Whether the masker also ascends the consistency term.
    pub masker_ascends_consistency: bool,
    pub masking: Masking,
    /// Evaluate validation zero-shot AUROC every this many epochs (0 = never).
    pub validate_every: usize,
    /// Return the parameters of the epoch with the best validation AUROC
    /// instead of the last epoch's.
    pub keep_best: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_cons: 1.0,
            lambda_mask: 1.0,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 50,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            masker_steps: 1,
            encoder_steps: 1,
            masker_ascends_consistency: true,
            masking: Masking::Adversarial,
            validate_every: 1,
            keep_best: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cons >= 0.0 && self.lambda_mask >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size {} leaves no contrastive negatives",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if self.encoder_steps == 0 {
            return Err(Error::Config("encoder steps per batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// The ablation ladder: masking source × pooling × consistency.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    RandomMeanPool,
    RandomMeanPoolConsistency,
    AdvMeanPool,
    AdvSelector,
    FullModel,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::RandomMeanPool,
        Variant::RandomMeanPoolConsistency,
        Variant::AdvMeanPool,
        Variant::AdvSelector,
        Variant::FullModel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::RandomMeanPool => "Random Mask + Mean Pool",
            Variant::RandomMeanPoolConsistency => "Random Mask + Mean Pool + Consistency",
            Variant::AdvMeanPool => "Adv. Mask + Mean Pool",
            Variant::AdvSelector => "Adv. Mask + Selector",
            Variant::FullModel => "Full Model",
        }
    }

    /// Short command-line spelling.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::RandomMeanPool => "random-mean",
            Variant::RandomMeanPoolConsistency => "random-mean-cons",
            Variant::AdvMeanPool => "adv-mean",
            Variant::AdvSelector => "adv-selector",
            Variant::FullModel => "full",
        }
    }

    pub fn masking(self) -> Masking {
        match self {
            Variant::RandomMeanPool | Variant::RandomMeanPoolConsistency => Masking::Random,
            _ => Masking::Adversarial,
        }
    }

    pub fn pooling(self) -> Pooling {
        match self {
            Variant::AdvSelector | Variant::FullModel => Pooling::Selector,
            _ => Pooling::Mean,
        }
    }

    pub fn uses_consistency(self) -> bool {
        matches!(self, Variant::RandomMeanPoolConsistency | Variant::FullModel)
    }

    /// Writes this variant's switches into the configs. Consistency keeps the
    /// configured weight when on and is zeroed when off.
    pub fn apply(self, model: &mut ModelConfig, train: &mut TrainConfig) {
        model.pooling = self.pooling();
        train.masking = self.masking();
        if !self.uses_consistency() {
            train.lambda_cons = 0.0;
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.slug() == s || v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL
                    .iter()
                    .map(|v| format!("{} ({:?})", v.slug(), v.name()))
                    .collect();
                Error::Config(format!("unknown variant {s:?}; valid: {}", names.join(", ")))
            })
    }
}

// ---------------------------------------------------------------- losses

/// InfoNCE of partial-view embeddings against the batch's reports.
pub fn loss_align(tape: &mut Tape, z: NodeId, u: NodeId, temperature: f64) -> Result<NodeId> {
    let (b, _) = tape.value(z).dims2()?;
    if b < 2 {
        return Err(Error::Contract("contrastive loss needs at least two pairs".into()));
    }
    let zn = tape.normalize_rows(z)?;
    let un = tape.normalize_rows(u)?;
    let ut = tape.transpose(un)?;
    let sims = tape.matmul(zn, ut)?;
    let logits = tape.scale(sims, 1.0 / temperature);
    let targets: Vec<usize> = (0..b).collect();
    tape.softmax_cross_entropy(logits, &targets)
}

/// `1 − cos(z_m, sg(z))`, averaged over rows when given a batch.
pub fn loss_cons(tape: &mut Tape, z_partial: NodeId, z_full: NodeId) -> Result<NodeId> {
    let anchor = tape.stop_gradient(z_full);
    let cos = tape.cosine_sim(z_partial, anchor)?;
    let m = tape.mean(cos);
    let neg = tape.scale(m, -1.0);
    Ok(tape.add_const(neg, 1.0))
}

/// `(mean(g) − ρ)²` per record over its valid cells, averaged over records.
/// `gates` holds `records·cells` entries.
pub fn loss_budget(
    tape: &mut Tape,
    gates: NodeId,
    valid: &[bool],
    records: usize,
    cells: usize,
    budget: f64,
) -> Result<NodeId> {
    let mut w = vec![0.0; records * cells];
    for r in 0..records {
        let row = &valid[r * cells..(r + 1) * cells];
        let n = row.iter().filter(|&&v| v).count();
        if n == 0 {
            return Err(Error::AllMasked);
        }
        for (j, &v) in row.iter().enumerate() {
            if v {
                w[r * cells + j] = 1.0 / n as f64;
            }
        }
    }
    let weights = tape.constant(Tensor::matrix(records, cells, w)?);
    let g = tape.reshape(gates, &[records * cells, 1])?;
    let means = tape.segment_pool(weights, g)?;
    let dev = tape.add_const(means, -budget);
    let sq = tape.mul(dev, dev)?;
    Ok(tape.mean(sq))
}

// ------------------------------------------------------------ composite

/// Stacked lattices and reports for one optimization batch.
pub struct Batch {
    pub input: BatchInput,
    pub reports: Vec<Vec<usize>>,
}

impl Batch {
    pub fn new(records: &[SignalRecord], patch_length: usize) -> Result<Self> {
        let grids = records
            .iter()
            .map(|r| patchify(&r.signal, patch_length))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = grids.iter().collect();
        Ok(Self {
            input: BatchInput::new(&refs)?,
            reports: records.iter().map(|r| r.report.clone()).collect(),
        })
    }

    pub fn records(&self) -> usize {
        self.input.records
    }
}

/// Gate values for one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum GateSource<'a> {
    /// Gumbel–Sigmoid from the masker at this temperature with this noise.
    Masker { temperature: f64, noise: &'a [f64] },
    /// Externally supplied constants (random-mask training, diagnostics).
    Fixed(&'a [f64]),
}

/// The weights the objective is assembled from.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_cons: f64,
    pub lambda_mask: f64,
    pub masker_ascends_consistency: bool,
}

impl From<&TrainConfig> for LossWeights {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lambda_cons: c.lambda_cons,
            lambda_mask: c.lambda_mask,
            masker_ascends_consistency: c.masker_ascends_consistency,
        }
    }
}

pub struct Forward {
    pub align: NodeId,
    pub cons: NodeId,
    pub budget: NodeId,
    /// `L_align + λ_cons·L_cons + λ_mask·L_budget`.
    pub total: NodeId,
    /// What the masker descends.
    pub masker_objective: NodeId,
    /// What the encoder side descends.
    pub encoder_objective: NodeId,
    pub gates: NodeId,
    pub visible: Vec<bool>,
    /// Records whose visible set was empty and got their least-gated cell back.
    pub refilled: usize,
    /// Tape node of each parameter entry, in entry order.
    pub param_ids: Vec<NodeId>,
}

/// Builds the whole training graph for a batch on `tape`.
pub fn scar_forward(
    tape: &mut Tape,
    params: &ScarParams,
    trainable: &[Group],
    cfg: &ModelConfig,
    weights: LossWeights,
    batch: &Batch,
    gates: GateSource<'_>,
) -> Result<Forward> {
    let bound = params.bind(tape, trainable);
    let (records, cells) = (batch.input.records, batch.input.cells);
    let valid = &batch.input.valid;
    let h = encode_tokens(tape, &bound, &batch.input)?;

    let g = match gates {
        GateSource::Masker { temperature, noise } => {
            let h_fixed = tape.stop_gradient(h);
            adversarial_gates(tape, &bound, h_fixed, temperature, noise, valid, true)?
        }
        GateSource::Fixed(values) => {
            if values.len() != records * cells {
                return Err(Error::Dimension(format!(
                    "{} fixed gates for {records}x{cells} cells",
                    values.len()
                )));
            }
            let forced = values
                .iter()
                .zip(valid)
                .map(|(&v, &ok)| if ok { v } else { 1.0 })
                .collect();
            tape.constant(Tensor::vector(forced))
        }
    };

    let (visible, refilled) = visible_set(tape.value(g).data(), valid, records, cells)?;
    let h_hat = mask_tokens(tape, h, g)?;
    let z_partial = match cfg.pooling {
        Pooling::Selector => select_and_pool(tape, &bound, h_hat, &visible, records, cells)?.1,
        Pooling::Mean => mean_pool(tape, h_hat, &visible, records, cells)?.1,
    };
    let z_full = full_view_embed(tape, h, valid, records, cells)?;
    let report_refs: Vec<&[usize]> = batch.reports.iter().map(|r| r.as_slice()).collect();
    let vocab = params
        .get("text.emb")
        .map(|t| t.shape()[0])
        .ok_or_else(|| Error::Contract("parameters lack a token embedding".into()))?;
    let u = encode_report(tape, &bound, &report_refs, vocab)?;

    let align = loss_align(tape, z_partial, u, cfg.temperature)?;
    let cons = loss_cons(tape, z_partial, z_full)?;
    let budget = loss_budget(tape, g, valid, records, cells, cfg.budget)?;

    let cons_w = tape.scale(cons, weights.lambda_cons);
    let budget_w = tape.scale(budget, weights.lambda_mask);
    let encoder_objective = tape.add(align, cons_w)?;
    let total = tape.add(encoder_objective, budget_w)?;
    let disruption = if weights.masker_ascends_consistency {
        encoder_objective
    } else {
        align
    };
    let neg = tape.scale(disruption, -1.0);
    let masker_objective = tape.add(neg, budget_w)?;
    Ok(Forward {
        align,
        cons,
        budget,
        total,
        masker_objective,
        encoder_objective,
        gates: g,
        visible,
        refilled,
        param_ids: bound.ids,
    })
}

/// `Ω_m`: valid cells with gate below one half. A record left with nothing
/// visible gets its least-gated valid cell back.
pub fn visible_set(
    gates: &[f64],
    valid: &[bool],
    records: usize,
    cells: usize,
) -> Result<(Vec<bool>, usize)> {
    let mut visible: Vec<bool> = gates.iter().zip(valid).map(|(&g, &v)| v && g < 0.5).collect();
    let mut refilled = 0;
    for r in 0..records {
        let span = r * cells..(r + 1) * cells;
        if visible[span.clone()].iter().any(|&v| v) {
            continue;
        }
        let best = span
            .clone()
            .filter(|&i| valid[i])
            .min_by(|&a, &b| gates[a].total_cmp(&gates[b]))
            .ok_or(Error::AllMasked)?;
        visible[best] = true;
        refilled += 1;
    }
    Ok((visible, refilled))
}

/// Binary gates closing exactly `round(ρ·|valid|)` valid cells per record,
/// always leaving at least one open.
pub fn random_gates(valid: &[bool], records: usize, cells: usize, budget: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gates = vec![1.0; records * cells];
    for r in 0..records {
        let mut idx: Vec<usize> = (r * cells..(r + 1) * cells).filter(|&i| valid[i]).collect();
        let k = ((budget * idx.len() as f64).round() as usize).min(idx.len().saturating_sub(1));
        idx.shuffle(&mut rng);
        for (n, &i) in idx.iter().enumerate() {
            gates[i] = if n < k { 1.0 } else { 0.0 };
        }
    }
    gates
}

// ---------------------------------------------------------------- Adam

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

impl Adam {
    /// One moment slot per tensor of the given sizes.
    pub fn new(sizes: &[usize], learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: vec![0; sizes.len()],
        }
    }

    pub fn for_params(params: &ScarParams, cfg: &TrainConfig) -> Self {
        let sizes: Vec<usize> = params.entries.iter().map(|e| e.value.numel()).collect();
        Self::new(&sizes, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    /// Applies one update to slot `i`.
    pub fn update(&mut self, i: usize, values: &mut [f64], grad: &[f64]) {
        self.t[i] += 1;
        let t = self.t[i] as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (m, v) = (&mut self.m[i], &mut self.v[i]);
        for j in 0..grad.len() {
            m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad[j];
            v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad[j] * grad[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            values[j] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
        }
    }
}

// --------------------------------------------------------------- trainer

/// Scalar loss values of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub align: f64,
    pub cons: f64,
    pub budget: f64,
    pub total: f64,
    pub mean_gate: f64,
    pub refilled: usize,
}

pub struct Trainer {
    pub params: ScarParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dims: ModelDims,
    pub adam: Adam,
    pub step: u64,
}

fn check_finite(report: &StepReport, what: &str, step: u64) -> Result<()> {
    if [report.align, report.cons, report.budget, report.total]
        .iter()
        .all(|v| v.is_finite())
    {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "{what} at step {step}: align={} cons={} budget={} total={} mean_gate={}",
            report.align, report.cons, report.budget, report.total, report.mean_gate
        )))
    }
}

fn mean_valid_gate(gates: &[f64], valid: &[bool]) -> f64 {
    let (s, n) = gates
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .fold((0.0, 0usize), |(s, n), (&g, _)| (s + g, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl Trainer {
    pub fn new(model: ModelConfig, train: TrainConfig, dims: ModelDims) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let params = ScarParams::init(&model, dims, mix_seed(train.seed, &[TAG_INIT]))?;
        let adam = Adam::for_params(&params, &train);
        Ok(Self {
            params,
            model,
            train,
            dims,
            adam,
            step: 0,
        })
    }

    fn weights(&self) -> LossWeights {
        LossWeights::from(&self.train)
    }

    /// Evaluates the composite without touching parameters.
    pub fn evaluate(&self, batch: &Batch, gates: GateSource<'_>) -> Result<StepReport> {
        let mut tape = Tape::new();
        let f = scar_forward(&mut tape, &self.params, &[], &self.model, self.weights(), batch, gates)?;
        Ok(report(&tape, &f, &batch.input.valid))
    }

    fn descend(
        &mut self,
        batch: &Batch,
        gates: GateSource<'_>,
        groups: &[Group],
        masker_side: bool,
    ) -> Result<StepReport> {
        let mut tape = Tape::new();
        let f = scar_forward(&mut tape, &self.params, groups, &self.model, self.weights(), batch, gates)?;
        let rep = report(&tape, &f, &batch.input.valid);
        let what = if masker_side { "masker step" } else { "encoder step" };
        check_finite(&rep, what, self.step)?;
        let root = if masker_side {
            f.masker_objective
        } else {
            f.encoder_objective
        };
        tape.backward(root)?;
        for (i, &id) in f.param_ids.iter().enumerate() {
            if !groups.contains(&self.params.entries[i].group) {
                continue;
            }
            let g = tape.grad(id);
            if !g.all_finite() {
                return Err(Error::Numeric(format!(
                    "{what} at step {}: non-finite gradient for {}",
                    self.step, self.params.entries[i].name
                )));
            }
            self.adam.update(i, self.params.entries[i].value.data_mut(), g.data());
        }
        Ok(rep)
    }

    /// One Adam step on the masker; every other group stays byte-identical.
    pub fn masker_step(&mut self, batch: &Batch, temperature: f64, noise: &[f64]) -> Result<StepReport> {
        self.descend(batch, GateSource::Masker { temperature, noise }, &[Group::Mask], true)
    }

    /// One Adam step on encoder, selector and report encoder; gates fixed.
    pub fn encoder_step(&mut self, batch: &Batch, gates: GateSource<'_>) -> Result<StepReport> {
        self.descend(batch, gates, &Group::ENCODER_SIDE, false)
    }

    fn noise(&self, n: usize, phase: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.train.seed, &[TAG_NOISE, self.step, phase]));
        gumbel_noise(&mut rng, n)
    }

    /// The alternating update for one batch at training progress `progress`.
    pub fn train_batch(&mut self, batch: &Batch, progress: f64) -> Result<StepReport> {
        let n = batch.input.records * batch.input.cells;
        let temperature = self.model.mask_temperature(progress);
        let mut last = StepReport::default();
        match self.train.masking {
            Masking::Adversarial => {
                for k in 0..self.train.masker_steps {
                    let noise = self.noise(n, 2 * k as u64);
                    self.masker_step(batch, temperature, &noise)?;
                }
                for k in 0..self.train.encoder_steps {
                    let noise = self.noise(n, 2 * k as u64 + 1);
                    last = self.encoder_step(batch, GateSource::Masker { temperature, noise: &noise })?;
                }
            }
            Masking::Random => {
                for k in 0..self.train.encoder_steps {
                    let seed = mix_seed(self.train.seed, &[TAG_RANDOM_GATES, self.step, k as u64]);
                    let gates = random_gates(&batch.input.valid, batch.input.records, batch.input.cells, self.model.budget, seed);
                    last = self.encoder_step(batch, GateSource::Fixed(&gates))?;
                }
            }
        }
        self.step += 1;
        Ok(last)
    }
}

fn report(tape: &Tape, f: &Forward, valid: &[bool]) -> StepReport {
    StepReport {
        align: tape.value(f.align).item(),
        cons: tape.value(f.cons).item(),
        budget: tape.value(f.budget).item(),
        total: tape.value(f.total).item(),
        mean_gate: mean_valid_gate(tape.value(f.gates).data(), valid),
        refilled: f.refilled,
    }
}

// ------------------------------------------------------------ train loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_align: f64,
    pub l_cons: f64,
    pub l_budget: f64,
    pub mean_gate: f64,
    pub val_auroc: Option<f64>,
    pub refilled: usize,
}

pub const METRICS_HEADER: &str = "epoch,l_align,l_cons,l_budget,mean_gate,val_auroc";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let auroc = self.val_auroc.map(|v| format!("{v}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.l_align, self.l_cons, self.l_budget, self.mean_gate, auroc
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub struct TrainOutcome {
    pub params: ScarParams,
    pub model: ModelConfig,
    pub dims: ModelDims,
    pub steps: u64,
    pub metrics: Vec<EpochMetrics>,
    /// Epoch whose parameters were returned.
    pub selected_epoch: usize,
}

/// Full training run over the corpus train split. `on_epoch` sees each
/// epoch's metrics and the current parameters.
pub fn train(
    corpus: &Corpus,
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &ScarParams) -> Result<()>,
) -> Result<TrainOutcome> {
    let cc = &corpus.config;
    if corpus.train.len() < 2 {
        return Err(Error::Input("training split needs at least two records".into()));
    }
    let dims = ModelDims {
        patch_length: cc.patch_length,
        vocab_size: cc.vocab_size,
    };
    let mut trainer = Trainer::new(model.clone(), cfg.clone(), dims)?;
    let batches_per_epoch = corpus.train.len().div_ceil(cfg.batch_size);
    let total_batches = (batches_per_epoch * cfg.epochs).max(1);
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut done = 0usize;
    let mut best: Option<(f64, usize, u64, ScarParams)> = None;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
        order.shuffle(&mut rng);
        let mut acc = [0.0; 4];
        let mut count = 0usize;
        let mut refilled = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let augmented = chunk
                .iter()
                .map(|&i| {
                    let seed = mix_seed(cfg.seed, &[TAG_AUGMENT, epoch as u64, i as u64]);
                    pretrain_augment(&corpus.train[i], &MaskConfig::PRETRAIN, cc.patch_length, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch::new(&augmented, cc.patch_length)?;
            let progress = done as f64 / (total_batches - 1).max(1) as f64;
            let rep = trainer.train_batch(&batch, progress)?;
            done += 1;
            acc[0] += rep.align;
            acc[1] += rep.cons;
            acc[2] += rep.budget;
            acc[3] += rep.mean_gate;
            refilled += rep.refilled;
            count += 1;
        }
        let n = count.max(1) as f64;
        let val_auroc = if cfg.validate_every > 0
            && ((epoch + 1) % cfg.validate_every == 0 || epoch + 1 == cfg.epochs)
            && !corpus.val.is_empty()
        {
            let prompts = PromptBank::new(&trainer.params, cc)?;
            zero_shot_auroc(&trainer.params, &trainer.model, &prompts, &corpus.val, cc.patch_length).ok()
        } else {
            None
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            l_align: acc[0] / n,
            l_cons: acc[1] / n,
            l_budget: acc[2] / n,
            mean_gate: acc[3] / n,
            val_auroc,
            refilled,
        };
        log::info!(
            "epoch {}: align {:.4} cons {:.4} budget {:.5} gate {:.3} val_auroc {:?}",
            m.epoch,
            m.l_align,
            m.l_cons,
            m.l_budget,
            m.mean_gate,
            m.val_auroc
        );
        if refilled > 0 {
            log::debug!("epoch {}: {refilled} records had an empty visible set", m.epoch);
        }
        on_epoch(&m, &trainer.params)?;
        if cfg.keep_best {
            if let Some(v) = m.val_auroc {
                if best.as_ref().is_none_or(|b| v > b.0) {
                    best = Some((v, m.epoch, trainer.step, trainer.params.clone()));
                }
            }
        }
        metrics.push(m);
    }
    let (params, steps, selected_epoch) = match best {
        Some((v, epoch, step, params)) => {
            log::info!("keeping epoch {epoch} (val_auroc {v:.4})");
            (params, step, epoch)
        }
        None => (trainer.params, trainer.step, cfg.epochs),
    };
    Ok(TrainOutcome {
        params,
        model: trainer.model,
        dims,
        steps,
        metrics,
        selected_epoch,
    })
}

// ------------------------------------------------------------ diagnostics

fn batches(records: &[SignalRecord], size: usize) -> impl Iterator<Item = &[SignalRecord]> {
    records.chunks(size.max(2)).filter(|c| c.len() >= 2)
}

/// Mean soft gate over valid cells of `records` at the end-of-training
/// temperature, with seeded Gumbel noise.
pub fn mean_gate(
    params: &ScarParams,
    model: &ModelConfig,
    records: &[SignalRecord],
    patch_length: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut n) = (0.0, 0usize);
    for chunk in records.chunks(64) {
        let batch = Batch::new(chunk, patch_length)?;
        let cells = batch.input.records * batch.input.cells;
        let noise = gumbel_noise(&mut rng, cells);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, &[]);
        let h = encode_tokens(&mut tape, &bound, &batch.input)?;
        let g = adversarial_gates(
            &mut tape,
            &bound,
            h,
            model.mask_temperature_end,
            &noise,
            &batch.input.valid,
            true,
        )?;
        for (&v, &ok) in tape.value(g).data().iter().zip(&batch.input.valid) {
            if ok {
                sum += v;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::AllMasked);
    }
    Ok(sum / n as f64)
}

/// Binary gates closing each record's top-`round(ρ·|valid|)` masker logits.
pub fn masker_top_gates(params: &ScarParams, model: &ModelConfig, batch: &Batch) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, &[]);
    let h = encode_tokens(&mut tape, &bound, &batch.input)?;
    let logits = crate::model::mask_logits(&mut tape, &bound, h)?;
    let l = tape.value(logits).data();
    let (records, cells) = (batch.input.records, batch.input.cells);
    let valid = &batch.input.valid;
    let mut gates = vec![1.0; records * cells];
    for r in 0..records {
        let mut idx: Vec<usize> = (r * cells..(r + 1) * cells).filter(|&i| valid[i]).collect();
        let k = ((model.budget * idx.len() as f64).round() as usize).min(idx.len().saturating_sub(1));
        idx.sort_by(|&a, &b| l[b].total_cmp(&l[a]).then(a.cmp(&b)));
        for (n, &i) in idx.iter().enumerate() {
            gates[i] = if n < k { 1.0 } else { 0.0 };
        }
    }
    Ok(gates)
}

/// Mean alignment loss under the masker's top-budget cells versus under
/// equally many random cells, with everything else frozen.
pub fn masker_vs_random_alignment(
    params: &ScarParams,
    model: &ModelConfig,
    records: &[SignalRecord],
    patch_length: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let weights = LossWeights {
        lambda_cons: 0.0,
        lambda_mask: 0.0,
        masker_ascends_consistency: false,
    };
    let (mut adv, mut rnd, mut n) = (0.0, 0.0, 0usize);
    for (b, chunk) in batches(records, batch_size).enumerate() {
        let batch = Batch::new(chunk, patch_length)?;
        let top = masker_top_gates(params, model, &batch)?;
        let rand_g = random_gates(
            &batch.input.valid,
            batch.input.records,
            batch.input.cells,
            model.budget,
            mix_seed(seed, &[b as u64]),
        );
        for (gates, acc) in [(&top, &mut adv), (&rand_g, &mut rnd)] {
            let mut tape = Tape::new();
            let f = scar_forward(&mut tape, params, &[], model, weights, &batch, GateSource::Fixed(gates))?;
            *acc += tape.value(f.align).item();
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Input("need at least two records".into()));
    }
    Ok((adv / n as f64, rnd / n as f64))
}
