//! Robustness metrics: macro-AUROC, the counterfactual missingness
//! resolution score, the supervised reference model it is measured against,
//! and the Rand./Hard evaluation protocol per missingness kind.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{mix_seed, Corpus, SignalRecord};
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::inference::{Prediction, ZeroShotModel};
use crate::missingness::{
    apply_mask, hard_candidates, sample_budget_mask, sample_random_mask, select_hard_mask,
    ImpactOracle, MaskConfig, MaskGeometry, MaskKind, MaskSpec,
};
use crate::model::{
    layer_widths, mean_pool, xavier, BatchInput, Group, ModelDims, ParamEntry,
    ScarParams,
};
use crate::tensor::Tensor;
use crate::tokenizer::patchify;
use crate::training::Adam;

/// Below this, `Σ S·I` is treated as zero and the score is undefined.
pub const CMRS_UNDEFINED_BELOW: f64 = 1e-9;

// ------------------------------------------------------------- AUROC

/// One-vs-rest AUROC by the Mann–Whitney rank sum with midranks for ties.
/// `None` when the labels lack positives or negatives.
pub fn class_auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Mean of per-class AUROC over classes that have both label values.
/// `scores[r][k]` and `labels[r][k]` for record `r`, class `k`.
pub fn macro_auroc(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} score rows for {} label rows",
            scores.len(),
            labels.len()
        )));
    }
    let k = labels.first().map(|l| l.len()).unwrap_or(0);
    if scores.iter().any(|s| s.len() != k) || labels.iter().any(|l| l.len() != k) {
        return Err(Error::Dimension("ragged score or label rows".into()));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for c in 0..k {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<u8> = labels.iter().map(|r| r[c]).collect();
        if let Some(a) = class_auroc(&s, &l) {
            total += a;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Metric("no class has both positive and negative records".into()));
    }
    Ok(total / used as f64)
}

// -------------------------------------------------- S, I, R and CMRS

/// How two probability vectors are compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agreement {
    /// `1 − mean_k |p_k − q_k|`.
    #[default]
    MeanAbsolute,
    /// `1 − mean_k JS(Bern(p_k), Bern(q_k)) / ln 2`.
    JensenShannon,
    /// Cosine of the two probability vectors.
    Cosine,
}

impl FromStr for Agreement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_absolute" => Ok(Agreement::MeanAbsolute),
            "jensen_shannon" => Ok(Agreement::JensenShannon),
            "cosine" => Ok(Agreement::Cosine),
            _ => Err(Error::Config(format!(
                "unknown agreement {s:?}; valid: mean_absolute, jensen_shannon, cosine"
            ))),
        }
    }
}

fn bernoulli_js(p: f64, q: f64) -> f64 {
    let kl = |a: f64, b: f64| {
        let term = |x: f64, y: f64| if x > 0.0 { x * (x / y).ln() } else { 0.0 };
        term(a, b) + term(1.0 - a, 1.0 - b)
    };
    let m = 0.5 * (p + q);
    0.5 * kl(p, m) + 0.5 * kl(q, m)
}

pub fn agreement_with(kind: Agreement, p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "agreement of vectors with different lengths");
    if p.is_empty() {
        return 1.0;
    }
    let n = p.len() as f64;
    match kind {
        Agreement::MeanAbsolute => 1.0 - p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() / n,
        Agreement::JensenShannon => {
            1.0 - p.iter().zip(q).map(|(&a, &b)| bernoulli_js(a, b)).sum::<f64>()
                / (n * std::f64::consts::LN_2)
        }
        Agreement::Cosine => {
            let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
            let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nq = q.iter().map(|a| a * a).sum::<f64>().sqrt();
            if np == 0.0 || nq == 0.0 {
                return if np == nq { 1.0 } else { 0.0 };
            }
            (dot / (np * nq)).clamp(0.0, 1.0)
        }
    }
}

/// Default agreement: `1 − mean |p − q|`.
pub fn agreement(p: &[f64], q: &[f64]) -> f64 {
    agreement_with(Agreement::MeanAbsolute, p, q)
}

pub fn impact(p0: &[f64], p_oracle: &[f64]) -> f64 {
    1.0 - agreement(p0, p_oracle)
}

/// Masked share of the record's samples.
pub fn severity(mask: &MaskSpec) -> f64 {
    mask.budget_fraction()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub record_id: String,
    pub mask_id: String,
    pub p0: Vec<f64>,
    pub p_oracle: Vec<f64>,
    pub p_method: Vec<f64>,
    pub s: f64,
    pub i: f64,
    pub r: f64,
}

impl LedgerRow {
    pub fn new(
        record_id: String,
        mask_id: String,
        s: f64,
        p0: Vec<f64>,
        p_oracle: Vec<f64>,
        p_method: Vec<f64>,
        kind: Agreement,
    ) -> Self {
        let i = 1.0 - agreement_with(kind, &p0, &p_oracle);
        let r = agreement_with(kind, &p_method, &p0);
        Self {
            record_id,
            mask_id,
            p0,
            p_oracle,
            p_method,
            s,
            i,
            r,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CmrsValue {
    Defined(f64),
    /// `Σ S·I` was (numerically) zero.
    Undefined,
}

impl CmrsValue {
    pub fn value(self) -> Option<f64> {
        match self {
            CmrsValue::Defined(v) => Some(v),
            CmrsValue::Undefined => None,
        }
    }
}

impl fmt::Display for CmrsValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CmrsValue::Defined(v) => write!(f, "{v:.4}"),
            CmrsValue::Undefined => write!(f, "undefined"),
        }
    }
}

/// `Σ S·I·R / Σ S·I` from `(S, I, R)` triples.
pub fn cmrs_from_triples(rows: &[(f64, f64, f64)]) -> Result<CmrsValue> {
    if rows.is_empty() {
        return Err(Error::Input("empty ledger".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for &(s, i, r) in rows {
        num += s * i * r;
        den += s * i;
    }
    if den < CMRS_UNDEFINED_BELOW {
        return Ok(CmrsValue::Undefined);
    }
    Ok(CmrsValue::Defined(num / den))
}

pub fn cmrs(ledger: &[LedgerRow]) -> Result<CmrsValue> {
    let triples: Vec<_> = ledger.iter().map(|r| (r.s, r.i, r.r)).collect();
    cmrs_from_triples(&triples)
}

pub fn ledger_csv(rows: &[LedgerRow]) -> String {
    let k = rows.first().map(|r| r.p0.len()).unwrap_or(0);
    let mut out = String::from("record_id,mask_id,s,i,r");
    for prefix in ["p0", "p_oracle", "p_method"] {
        for c in 0..k {
            out.push_str(&format!(",{prefix}_{c}"));
        }
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{},{},{},{},{}", row.record_id, row.mask_id, row.s, row.i, row.r));
        for v in row.p0.iter().chain(&row.p_oracle).chain(&row.p_method) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

// ------------------------------------------------------ predictors

/// Anything that maps records to per-class scores and probabilities.
pub trait Predictor: Sync {
    fn predict(&self, records: &[SignalRecord]) -> Result<Vec<Prediction>>;
}

impl Predictor for ZeroShotModel {
    fn predict(&self, records: &[SignalRecord]) -> Result<Vec<Prediction>> {
        ZeroShotModel::predict(self, records)
    }
}

// ------------------------------------------------- reference model

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceConfig {
    pub encoder_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Clean-test macro-AUROC the model must reach before use.
    pub quality_gate: f64,
    pub seed: u64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![64],
            embed_dim: 32,
            epochs: 60,
            batch_size: 16,
            learning_rate: 3e-3,
            quality_gate: 0.9,
            seed: 0,
        }
    }
}

/// Supervised full-view classifier: shared patch encoder, mean pool over
/// valid cells, linear multi-label head, trained with binary cross-entropy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceModel {
    pub config: ReferenceConfig,
    pub dims: ModelDims,
    pub num_classes: usize,
    pub params: ScarParams,
    /// Clean-test macro-AUROC measured after training.
    pub clean_auroc: Option<f64>,
}

impl ReferenceModel {
    pub fn init(config: ReferenceConfig, patch_length: usize, num_classes: usize) -> Result<Self> {
        if config.embed_dim == 0 || config.encoder_hidden.contains(&0) || num_classes == 0 {
            return Err(Error::Config("reference widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, &[0x52]));
        let mut entries = Vec::new();
        let widths = layer_widths(patch_length, &config.encoder_hidden, config.embed_dim)
            .into_iter()
            .chain(std::iter::once((config.embed_dim, num_classes)));
        let n_enc = config.encoder_hidden.len() + 1;
        for (i, (fi, fo)) in widths.enumerate() {
            let (prefix, idx) = if i < n_enc { ("ref", i) } else { ("head", 0) };
            entries.push(ParamEntry {
                name: format!("{prefix}.w{idx}"),
                group: Group::Enc,
                value: xavier(&mut rng, fi, fo),
            });
            entries.push(ParamEntry {
                name: format!("{prefix}.b{idx}"),
                group: Group::Enc,
                value: Tensor::zeros(&[fo]),
            });
        }
        Ok(Self {
            config,
            dims: ModelDims {
                patch_length,
                vocab_size: 0,
            },
            num_classes,
            params: ScarParams { entries },
            clean_auroc: None,
        })
    }

    /// Builds the logits graph; returns `(tape, logits node)`.
    fn forward(&self, records: &[SignalRecord], trainable: bool) -> Result<(Tape, crate::NodeId, Vec<crate::NodeId>)> {
        let grids = records
            .iter()
            .map(|r| patchify(&r.signal, self.dims.patch_length))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = grids.iter().collect();
        let input = BatchInput::new(&refs)?;
        let mut tape = Tape::new();
        let groups: &[Group] = if trainable { &[Group::Enc] } else { &[] };
        let bound = self.params.bind(&mut tape, groups);
        let x = tape.constant(input.patches.clone());
        let h = bound.mlp_named(&mut tape, "ref", x)?;
        let h = tape.tanh(h);
        let (_, z) = mean_pool(&mut tape, h, &input.valid, input.records, input.cells)?;
        let logits = bound.mlp_named(&mut tape, "head", z)?;
        Ok((tape, logits, bound.ids))
    }

    /// Per-class logits for each record.
    pub fn logits(&self, records: &[SignalRecord]) -> Result<Vec<Vec<f64>>> {
        let chunks: Vec<Result<Vec<Vec<f64>>>> = records
            .par_chunks(32)
            .map(|chunk| {
                let (tape, logits, _) = self.forward(chunk, false)?;
                let lv = tape.value(logits);
                Ok((0..chunk.len()).map(|r| lv.row(r).to_vec()).collect())
            })
            .collect();
        let mut out = Vec::with_capacity(records.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    pub fn probabilities(&self, records: &[SignalRecord]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .logits(records)?
            .into_iter()
            .map(|l| l.into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect())
            .collect())
    }

    pub fn auroc(&self, records: &[SignalRecord]) -> Result<f64> {
        let labels: Vec<Vec<u8>> = records.iter().map(|r| r.labels.clone()).collect();
        macro_auroc(&self.logits(records)?, &labels)
    }

    /// Trains on the clean train split and records the clean-test AUROC.
    pub fn train(corpus: &Corpus, config: ReferenceConfig) -> Result<Self> {
        let cc = &corpus.config;
        let mut model = Self::init(config.clone(), cc.patch_length, cc.num_classes)?;
        let sizes: Vec<usize> = model.params.entries.iter().map(|e| e.value.numel()).collect();
        let mut adam = Adam::new(&sizes, config.learning_rate, 0.9, 0.999, 1e-8);
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        for epoch in 0..config.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, &[0x53, epoch as u64]));
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut n = 0usize;
            for chunk in order.chunks(config.batch_size.max(1)) {
                let batch: Vec<SignalRecord> = chunk.iter().map(|&i| corpus.train[i].clone()).collect();
                let (mut tape, logits, ids) = model.forward(&batch, true)?;
                let targets: Vec<f64> = batch
                    .iter()
                    .flat_map(|r| r.labels.iter().map(|&l| l as f64))
                    .collect();
                let targets = Tensor::matrix(batch.len(), model.num_classes, targets)?;
                let loss = tape.bce_with_logits(logits, &targets)?;
                let lv = tape.value(loss).item();
                if !lv.is_finite() {
                    return Err(Error::Numeric(format!("reference loss {lv} at epoch {epoch}")));
                }
                tape.backward(loss)?;
                for (i, &id) in ids.iter().enumerate() {
                    let g = tape.grad(id);
                    adam.update(i, model.params.entries[i].value.data_mut(), g.data());
                }
                total += lv;
                n += 1;
            }
            log::info!("reference epoch {}: bce {:.4}", epoch + 1, total / n.max(1) as f64);
        }
        if !corpus.test.is_empty() {
            model.clean_auroc = Some(model.auroc(&corpus.test)?);
        }
        Ok(model)
    }

    /// Fails unless the measured clean-test AUROC clears the quality gate.
    pub fn check_quality(&self) -> Result<f64> {
        let a = self
            .clean_auroc
            .ok_or_else(|| Error::Dependency("reference model has no clean-test AUROC".into()))?;
        if a < self.config.quality_gate {
            return Err(Error::Dependency(format!(
                "reference clean-test AUROC {a:.4} is below the gate {}",
                self.config.quality_gate
            )));
        }
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Dependency(format!("reference model {}: {e}", path.display())))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

impl Predictor for ReferenceModel {
    fn predict(&self, records: &[SignalRecord]) -> Result<Vec<Prediction>> {
        Ok(self
            .logits(records)?
            .into_iter()
            .map(|l| Prediction::from_scores(l, 1.0))
            .collect())
    }
}

impl ImpactOracle for ReferenceModel {
    fn impact(&self, record: &SignalRecord, mask: &MaskSpec) -> Result<f64> {
        let masked = apply_mask(record, mask)?;
        let p = self.probabilities(&[record.clone(), masked])?;
        Ok(impact(&p[0], &p[1]))
    }
}

/// Impact oracle with the record's full-view probabilities already known.
struct KnownBaseline<'a> {
    reference: &'a ReferenceModel,
    p0: &'a [f64],
    agreement: Agreement,
}

impl ImpactOracle for KnownBaseline<'_> {
    fn impact(&self, record: &SignalRecord, mask: &MaskSpec) -> Result<f64> {
        let masked = apply_mask(record, mask)?;
        let p = self.reference.probabilities(std::slice::from_ref(&masked))?;
        Ok(1.0 - agreement_with(self.agreement, self.p0, &p[0]))
    }
}

// ------------------------------------------------- evaluation protocol

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    Rand,
    Hard,
}

impl Protocol {
    pub fn label(self) -> &'static str {
        match self {
            Protocol::Rand => "Rand.",
            Protocol::Hard => "Hard",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub mask: MaskConfig,
    /// Size of the Hard candidate pool, the Rand draw included.
    pub candidates: usize,
    /// Fixes the masked-sample fraction instead of drawing it.
    pub budget: Option<f64>,
    pub agreement: Agreement,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            mask: MaskConfig::EVAL,
            candidates: 16,
            budget: None,
            agreement: Agreement::MeanAbsolute,
            seed: 0,
        }
    }
}

fn kind_tag(kind: MaskKind) -> u64 {
    match kind {
        MaskKind::LeadOnly => 1,
        MaskKind::TemporalOnly => 2,
        MaskKind::Joint => 3,
    }
}

/// Masks of one condition, one per record, shared by every evaluated model.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub kind: MaskKind,
    pub protocol: Protocol,
    pub masks: Vec<MaskSpec>,
}

/// The Rand draw for record `index` under `kind`.
pub fn random_mask_for(
    kind: MaskKind,
    geometry: MaskGeometry,
    index: usize,
    settings: &EvalSettings,
) -> Result<MaskSpec> {
    let seed = mix_seed(settings.seed, &[0x60, kind_tag(kind), index as u64]);
    match settings.budget {
        Some(b) => sample_budget_mask(kind, &settings.mask, geometry, b, seed),
        None => sample_random_mask(kind, &settings.mask, geometry, seed),
    }
}

pub fn plan_masks(
    records: &[SignalRecord],
    geometry: MaskGeometry,
    kind: MaskKind,
    protocol: Protocol,
    reference: Option<&ReferenceModel>,
    settings: &EvalSettings,
) -> Result<MaskPlan> {
    let p0 = match (protocol, reference) {
        (Protocol::Hard, Some(r)) => Some(r.probabilities(records)?),
        (Protocol::Hard, None) => {
            return Err(Error::Dependency("Hard masks need a reference model".into()))
        }
        _ => None,
    };
    let masks = records
        .par_iter()
        .enumerate()
        .map(|(i, record)| {
            let rand = random_mask_for(kind, geometry, i, settings)?;
            match protocol {
                Protocol::Rand => Ok(rand),
                Protocol::Hard => {
                    let seed = mix_seed(settings.seed, &[0x61, kind_tag(kind), i as u64]);
                    let mut pool = hard_candidates(&rand, &settings.mask, settings.candidates.max(1), seed)?;
                    let oracle = KnownBaseline {
                        reference: reference.expect("checked above"),
                        p0: &p0.as_ref().expect("computed above")[i],
                        agreement: settings.agreement,
                    };
                    let best = select_hard_mask(record, &pool, Some(&oracle))?;
                    Ok(pool.swap_remove(best))
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskPlan {
        kind,
        protocol,
        masks,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionResult {
    pub kind: MaskKind,
    pub protocol: Protocol,
    pub auroc: f64,
    pub cmrs: CmrsValue,
    pub mean_impact: f64,
    pub mean_severity: f64,
    pub ledger: Vec<LedgerRow>,
}

/// Reference outputs of one plan, reusable across evaluated models.
pub struct ReferenceView {
    pub masked: Vec<SignalRecord>,
    pub p0: Vec<Vec<f64>>,
    pub p_oracle: Vec<Vec<f64>>,
}

pub fn reference_view(
    records: &[SignalRecord],
    plan: &MaskPlan,
    reference: &ReferenceModel,
) -> Result<ReferenceView> {
    let masked = records
        .iter()
        .zip(&plan.masks)
        .map(|(r, m)| apply_mask(r, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReferenceView {
        p0: reference.probabilities(records)?,
        p_oracle: reference.probabilities(&masked)?,
        masked,
    })
}

pub fn evaluate_condition(
    method: &dyn Predictor,
    records: &[SignalRecord],
    plan: &MaskPlan,
    view: &ReferenceView,
    agreement: Agreement,
) -> Result<ConditionResult> {
    let preds = method.predict(&view.masked)?;
    let labels: Vec<Vec<u8>> = records.iter().map(|r| r.labels.clone()).collect();
    let scores: Vec<Vec<f64>> = preds.iter().map(|p| p.scores.clone()).collect();
    let auroc = macro_auroc(&scores, &labels)?;
    let ledger: Vec<LedgerRow> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            LedgerRow::new(
                r.id.clone(),
                plan.masks[i].id(),
                severity(&plan.masks[i]),
                view.p0[i].clone(),
                view.p_oracle[i].clone(),
                preds[i].probabilities.clone(),
                agreement,
            )
        })
        .collect();
    let n = ledger.len().max(1) as f64;
    Ok(ConditionResult {
        kind: plan.kind,
        protocol: plan.protocol,
        auroc,
        cmrs: cmrs(&ledger)?,
        mean_impact: ledger.iter().map(|r| r.i).sum::<f64>() / n,
        mean_severity: ledger.iter().map(|r| r.s).sum::<f64>() / n,
        ledger,
    })
}

/// Masks and reference outputs for every (kind, protocol) condition.
pub struct EvalPlans {
    pub conditions: Vec<(MaskPlan, ReferenceView)>,
}

impl EvalPlans {
    pub fn build(
        records: &[SignalRecord],
        geometry: MaskGeometry,
        reference: &ReferenceModel,
        settings: &EvalSettings,
        kinds: &[MaskKind],
    ) -> Result<Self> {
        let mut conditions = Vec::new();
        for &kind in kinds {
            for protocol in [Protocol::Rand, Protocol::Hard] {
                let plan = plan_masks(records, geometry, kind, protocol, Some(reference), settings)?;
                let view = reference_view(records, &plan, reference)?;
                conditions.push((plan, view));
            }
        }
        Ok(Self { conditions })
    }

    pub fn get(&self, kind: MaskKind, protocol: Protocol) -> Option<&(MaskPlan, ReferenceView)> {
        self.conditions
            .iter()
            .find(|(p, _)| p.kind == kind && p.protocol == protocol)
    }
}

/// Every (kind × protocol) result for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub clean_auroc: f64,
    pub results: Vec<ConditionResult>,
}

pub fn decompose_by_missingness(
    method: &dyn Predictor,
    records: &[SignalRecord],
    plans: &EvalPlans,
    agreement: Agreement,
) -> Result<Decomposition> {
    let clean = method.predict(records)?;
    let labels: Vec<Vec<u8>> = records.iter().map(|r| r.labels.clone()).collect();
    let scores: Vec<Vec<f64>> = clean.into_iter().map(|p| p.scores).collect();
    let clean_auroc = macro_auroc(&scores, &labels)?;
    let results = plans
        .conditions
        .iter()
        .map(|(plan, view)| evaluate_condition(method, records, plan, view, agreement))
        .collect::<Result<Vec<_>>>()?;
    Ok(Decomposition {
        clean_auroc,
        results,
    })
}

/// Column labels of the missingness-type table.
pub const DECOMPOSITION_COLUMNS: [&str; 4] = ["Lead-only", "Temporal-only", "Joint-Rand.", "Joint-Hard"];

impl Decomposition {
    pub fn get(&self, kind: MaskKind, protocol: Protocol) -> Option<&ConditionResult> {
        self.results
            .iter()
            .find(|r| r.kind == kind && r.protocol == protocol)
    }

    /// The four conditions of the missingness-type table, in column order.
    pub fn table_conditions(&self) -> Vec<Option<&ConditionResult>> {
        vec![
            self.get(MaskKind::LeadOnly, Protocol::Rand),
            self.get(MaskKind::TemporalOnly, Protocol::Rand),
            self.get(MaskKind::Joint, Protocol::Rand),
            self.get(MaskKind::Joint, Protocol::Hard),
        ]
    }

    /// `condition,kind,protocol,auroc,cmrs,mean_impact,mean_severity` for every cell.
    pub fn csv(&self) -> String {
        let mut out = String::from("condition,kind,protocol,auroc,cmrs,mean_impact,mean_severity\n");
        out.push_str(&format!("Clean,none,none,{},,,\n", self.clean_auroc));
        for r in &self.results {
            let label = format!("{}-{}", r.kind.name(), r.protocol.label());
            let cmrs = r.cmrs.value().map(|v| v.to_string()).unwrap_or_else(|| "undefined".into());
            out.push_str(&format!(
                "{label},{},{},{},{cmrs},{},{}\n",
                r.kind.name(),
                r.protocol.label(),
                r.auroc,
                r.mean_impact,
                r.mean_severity
            ));
        }
        out
    }

    /// Aligned text table: metrics as rows, the four conditions as columns.
    pub fn render_table(&self, title: &str) -> String {
        let cells = self.table_conditions();
        let mut out = format!("{title}\n{:<8}", "");
        for c in DECOMPOSITION_COLUMNS {
            out.push_str(&format!("{c:>15}"));
        }
        out.push('\n');
        out.push_str(&format!("{:<8}", "AUROC"));
        for c in &cells {
            match c {
                Some(r) => out.push_str(&format!("{:>15.2}", 100.0 * r.auroc)),
                None => out.push_str(&format!("{:>15}", "-")),
            }
        }
        out.push('\n');
        out.push_str(&format!("{:<8}", "CMRS"));
        for c in &cells {
            match c {
                Some(r) => out.push_str(&format!("{:>15}", r.cmrs.to_string())),
                None => out.push_str(&format!("{:>15}", "-")),
            }
        }
        out.push('\n');
        out
    }
}

/// Joint-missingness summary: `{AUROC, CMRS} × {Rand., Hard}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    pub auroc_rand: f64,
    pub auroc_hard: f64,
    pub cmrs_rand: CmrsValue,
    pub cmrs_hard: CmrsValue,
}

pub const SUMMARY_COLUMNS: [&str; 4] = ["AUROC Rand.", "AUROC Hard", "CMRS Rand.", "CMRS Hard"];

impl RobustnessSummary {
    pub fn from_decomposition(d: &Decomposition) -> Option<Self> {
        let rand = d.get(MaskKind::Joint, Protocol::Rand)?;
        let hard = d.get(MaskKind::Joint, Protocol::Hard)?;
        Some(Self {
            auroc_rand: rand.auroc,
            auroc_hard: hard.auroc,
            cmrs_rand: rand.cmrs,
            cmrs_hard: hard.cmrs,
        })
    }

    pub fn csv(&self, method: &str) -> String {
        let c = |v: CmrsValue| v.value().map(|x| x.to_string()).unwrap_or_else(|| "undefined".into());
        format!(
            "method,auroc_rand,auroc_hard,cmrs_rand,cmrs_hard\n{method},{},{},{},{}\n",
            self.auroc_rand,
            self.auroc_hard,
            c(self.cmrs_rand),
            c(self.cmrs_hard)
        )
    }

    pub fn render(&self, method: &str) -> String {
        let mut out = format!("{:<28}", "Method");
        for c in SUMMARY_COLUMNS {
            out.push_str(&format!("{c:>13}"));
        }
        out.push('\n');
        out.push_str(&format!(
            "{method:<28}{:>13.2}{:>13.2}{:>13}{:>13}\n",
            100.0 * self.auroc_rand,
            100.0 * self.auroc_hard,
            self.cmrs_rand.to_string(),
            self.cmrs_hard.to_string()
        ));
        out
    }
}
