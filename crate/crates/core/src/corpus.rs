//! Synthetic paired signal/report corpus with planted diagnostic evidence.
//!
//! Every positive class of a record gets one high-amplitude primary motif in
//! a single (lead, patch) cell and at least two weaker secondary copies of the
//! same motif elsewhere. The evidence map records exactly where they went, so
//! targeting and compensation claims can be checked against ground truth.
//!
//! The report is a bag of tokens: each class owns four dedicated ids and a
//! report carries at least two of them for every positive class, diluted with
//! filler ids that no class owns. Id 0 is the pad token.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_TOKEN: usize = 0;
pub const TOKENS_PER_CLASS: usize = 4;
/// Primary motif amplitude relative to a secondary cue.
pub const PRIMARY_TO_SECONDARY: f64 = 3.0;
const SECONDARY_AMPLITUDE: f64 = 0.5;
const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub num_leads: usize,
    pub signal_length: usize,
    pub patch_length: usize,
    pub num_classes: usize,
    pub vocab_size: usize,
    pub report_length: usize,
    pub train_records: usize,
    pub val_records: usize,
    pub test_records: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_leads: 12,
            signal_length: 500,
            patch_length: 50,
            num_classes: 5,
            vocab_size: 64,
            report_length: 16,
            train_records: 2000,
            val_records: 400,
            test_records: 400,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn num_patches(&self) -> usize {
        self.signal_length / self.patch_length
    }

    pub fn num_cells(&self) -> usize {
        self.num_leads * self.num_patches()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_leads == 0 || self.signal_length == 0 || self.patch_length == 0 {
            return bad("leads, signal length and patch length must be positive".into());
        }
        if !self.signal_length.is_multiple_of(self.patch_length) {
            return bad(format!(
                "signal length {} is not divisible by patch length {}",
                self.signal_length, self.patch_length
            ));
        }
        if self.num_classes == 0 || self.num_classes > self.vocab_size / TOKENS_PER_CLASS {
            return bad(format!(
                "{} classes need at least {} vocabulary ids",
                self.num_classes,
                self.num_classes * TOKENS_PER_CLASS
            ));
        }
        // id 0 is reserved for padding
        if self.num_classes * TOKENS_PER_CLASS + 1 > self.vocab_size {
            return bad("vocabulary has no room for the pad token".into());
        }
        if self.report_length < 2 * TOKENS_PER_CLASS {
            return bad(format!(
                "report length {} cannot hold two classes' tokens",
                self.report_length
            ));
        }
        // one primary + two secondary cells per class, two classes per record
        if self.num_cells() < 6 || self.num_leads < 3 {
            return bad("lattice too small to plant evidence for two classes".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and >= 0", self.noise_std));
        }
        Ok(())
    }

    /// Dedicated report tokens of class `cls`.
    pub fn class_tokens(&self, cls: usize) -> std::ops::Range<usize> {
        let start = 1 + cls * TOKENS_PER_CLASS;
        start..start + TOKENS_PER_CLASS
    }

    /// Class that owns `token`, if any.
    pub fn token_class(&self, token: usize) -> Option<usize> {
        if token == PAD_TOKEN {
            return None;
        }
        let cls = (token - 1) / TOKENS_PER_CLASS;
        (cls < self.num_classes).then_some(cls)
    }

    fn filler_tokens(&self) -> std::ops::Range<usize> {
        1 + self.num_classes * TOKENS_PER_CLASS..self.vocab_size
    }
}

/// An `L × C` signal stored row-major, with an optional per-sample missing
/// flag channel. Serialized as nested arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    pub leads: usize,
    pub samples: usize,
    pub data: Vec<f64>,
    pub missing: Option<Vec<bool>>,
}

impl Signal {
    pub fn new(leads: usize, samples: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != leads * samples {
            return Err(Error::Dimension(format!(
                "{} values for a {leads}x{samples} signal",
                data.len()
            )));
        }
        Ok(Self {
            leads,
            samples,
            data,
            missing: None,
        })
    }

    pub fn lead(&self, l: usize) -> &[f64] {
        &self.data[l * self.samples..(l + 1) * self.samples]
    }

    pub fn is_missing(&self, l: usize, t: usize) -> bool {
        self.missing
            .as_ref()
            .is_some_and(|m| m[l * self.samples + t])
    }

    pub fn missing_count(&self) -> usize {
        self.missing
            .as_ref()
            .map_or(0, |m| m.iter().filter(|&&v| v).count())
    }
}

#[derive(Serialize, Deserialize)]
struct SignalRepr {
    rows: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    missing: Option<Vec<Vec<bool>>>,
}

impl Serialize for Signal {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows = self.data.chunks(self.samples.max(1)).map(<[f64]>::to_vec).collect();
        let missing = self
            .missing
            .as_ref()
            .map(|m| m.chunks(self.samples.max(1)).map(<[bool]>::to_vec).collect());
        SignalRepr { rows, missing }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Signal {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = SignalRepr::deserialize(d)?;
        let leads = repr.rows.len();
        let samples = repr.rows.first().map_or(0, Vec::len);
        if repr.rows.iter().any(|r| r.len() != samples) {
            return Err(D::Error::custom("ragged signal rows"));
        }
        let missing = match repr.missing {
            Some(m) if m.len() == leads && m.iter().all(|r| r.len() == samples) => {
                Some(m.into_iter().flatten().collect())
            }
            Some(_) => return Err(D::Error::custom("missing mask shape mismatch")),
            None => None,
        };
        Ok(Signal {
            leads,
            samples,
            data: repr.rows.into_iter().flatten().collect(),
            missing,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceKind {
    Primary,
    Secondary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceCell {
    pub lead: usize,
    pub patch: usize,
    pub kind: EvidenceKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEvidence {
    pub class: usize,
    pub cells: Vec<EvidenceCell>,
}

impl ClassEvidence {
    pub fn primary(&self) -> EvidenceCell {
        *self
            .cells
            .iter()
            .find(|c| c.kind == EvidenceKind::Primary)
            .expect("every class evidence has a primary cell")
    }

    pub fn secondary(&self) -> impl Iterator<Item = &EvidenceCell> {
        self.cells.iter().filter(|c| c.kind == EvidenceKind::Secondary)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalRecord {
    pub id: String,
    pub signal: Signal,
    pub labels: Vec<u8>,
    pub report: Vec<usize>,
    pub evidence_map: Vec<ClassEvidence>,
}

impl SignalRecord {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(k, _)| k)
    }

    pub fn evidence_for(&self, class: usize) -> Option<&ClassEvidence> {
        self.evidence_map.iter().find(|e| e.class == class)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub train: Vec<SignalRecord>,
    pub val: Vec<SignalRecord>,
    pub test: Vec<SignalRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[SignalRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything random about one record, drawn before rendering so the
/// baseline and motif parts can be rendered separately.
#[derive(Clone, Debug)]
pub struct RecordPlan {
    pub labels: Vec<u8>,
    pub evidence_map: Vec<ClassEvidence>,
    pub report: Vec<usize>,
    beat_period: f64,
    beat_phase: f64,
    lead_gain: Vec<f64>,
    noise_seed: u64,
}

/// Derives an independent stream seed from a base seed and a path of tags.
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    // splitmix64 finalizer over the folded parts
    let mut z = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_mul(0xBF58_476D_1CE4_E5B9));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Leads on which the primary motif of `class` may appear.
pub fn primary_leads(cfg: &CorpusConfig, class: usize) -> [usize; 2] {
    let l = cfg.num_leads;
    [(2 * class) % l, (2 * class + 1) % l]
}

/// Oscillation frequency (cycles per patch) of the class motif.
fn motif_cycles(class: usize) -> f64 {
    2.0 + class as f64
}

/// Motif waveform of `class` over one patch: a Hann-windowed sinusoid.
pub fn motif(class: usize, patch_length: usize, amplitude: f64) -> Vec<f64> {
    let n = patch_length as f64;
    (0..patch_length)
        .map(|i| {
            let x = (i as f64 + 0.5) / n;
            let window = 0.5 - 0.5 * (2.0 * PI * x).cos();
            amplitude * window * (2.0 * PI * motif_cycles(class) * x).sin()
        })
        .collect()
}

pub fn plan_record(cfg: &CorpusConfig, rng: &mut impl Rng) -> RecordPlan {
    let k = cfg.num_classes;
    let s = cfg.num_patches();
    let n_pos = if k >= 2 && rng.gen_bool(0.4) { 2 } else { 1 };
    let mut classes: Vec<usize> = (0..k).collect();
    classes.shuffle(rng);
    let mut positives = classes[..n_pos].to_vec();
    positives.sort_unstable();

    let mut labels = vec![0u8; k];
    let mut used: Vec<(usize, usize)> = Vec::new();
    let mut evidence_map = Vec::with_capacity(n_pos);
    for &cls in &positives {
        labels[cls] = 1;
        let leads = primary_leads(cfg, cls);
        let primary = loop {
            let cell = (leads[rng.gen_range(0..2)], rng.gen_range(0..s));
            if !used.contains(&cell) {
                break cell;
            }
        };
        used.push(primary);
        let mut cells = vec![EvidenceCell {
            lead: primary.0,
            patch: primary.1,
            kind: EvidenceKind::Primary,
        }];
        let n_secondary = rng.gen_range(2..=3);
        while cells.len() < 1 + n_secondary {
            let cell = (rng.gen_range(0..cfg.num_leads), rng.gen_range(0..s));
            if leads.contains(&cell.0) || used.contains(&cell) {
                continue;
            }
            used.push(cell);
            cells.push(EvidenceCell {
                lead: cell.0,
                patch: cell.1,
                kind: EvidenceKind::Secondary,
            });
        }
        evidence_map.push(ClassEvidence { class: cls, cells });
    }

    let report = plan_report(cfg, &positives, rng);
    RecordPlan {
        labels,
        evidence_map,
        report,
        beat_period: rng.gen_range(70.0..110.0),
        beat_phase: rng.gen_range(0.0..1.0),
        lead_gain: (0..cfg.num_leads)
            .map(|_| {
                let g = rng.gen_range(0.5..1.0);
                if rng.gen_bool(0.25) {
                    -g
                } else {
                    g
                }
            })
            .collect(),
        noise_seed: rng.gen(),
    }
}

fn plan_report(cfg: &CorpusConfig, positives: &[usize], rng: &mut impl Rng) -> Vec<usize> {
    let mut tokens = Vec::with_capacity(cfg.report_length);
    for &cls in positives {
        let mut own: Vec<usize> = cfg.class_tokens(cls).collect();
        own.shuffle(rng);
        let take = rng.gen_range(2..=TOKENS_PER_CLASS);
        tokens.extend_from_slice(&own[..take]);
    }
    let filler = cfg.filler_tokens();
    let target_len = rng
        .gen_range(cfg.report_length / 2..=cfg.report_length)
        .max(tokens.len());
    if !filler.is_empty() {
        while tokens.len() < target_len {
            tokens.push(rng.gen_range(filler.clone()));
        }
    }
    tokens.shuffle(rng);
    tokens.resize(cfg.report_length, PAD_TOKEN);
    tokens
}

impl RecordPlan {
    /// Quasi-periodic beat train shared by all leads up to a per-lead gain.
    pub fn render_baseline(&self, cfg: &CorpusConfig) -> Vec<f64> {
        let c = cfg.signal_length;
        let mut beat = vec![0.0; c];
        let first = self.beat_phase * self.beat_period;
        let mut center = first - self.beat_period;
        while center < c as f64 + self.beat_period {
            for (t, b) in beat.iter_mut().enumerate() {
                let dt = t as f64 - center;
                // sharp spike followed by a broad recovery wave
                *b += (-0.5 * (dt / 2.0).powi(2)).exp()
                    + 0.3 * (-0.5 * ((dt - 0.3 * self.beat_period) / 8.0).powi(2)).exp();
            }
            center += self.beat_period;
        }
        let mut out = Vec::with_capacity(cfg.num_leads * c);
        for &g in &self.lead_gain {
            out.extend(beat.iter().map(|b| g * b));
        }
        out
    }

    /// Planted motifs only, zero everywhere else.
    pub fn render_motifs(&self, cfg: &CorpusConfig) -> Vec<f64> {
        let c = cfg.signal_length;
        let p = cfg.patch_length;
        let mut out = vec![0.0; cfg.num_leads * c];
        for ev in &self.evidence_map {
            for cell in &ev.cells {
                let amp = match cell.kind {
                    EvidenceKind::Primary => SECONDARY_AMPLITUDE * PRIMARY_TO_SECONDARY,
                    EvidenceKind::Secondary => SECONDARY_AMPLITUDE,
                };
                let start = cell.lead * c + cell.patch * p;
                for (o, m) in out[start..start + p].iter_mut().zip(motif(ev.class, p, amp)) {
                    *o += m;
                }
            }
        }
        out
    }

    /// Baseline + motifs + Gaussian noise, before normalization.
    pub fn render_raw(&self, cfg: &CorpusConfig) -> Vec<f64> {
        let mut out = self.render_baseline(cfg);
        for (o, m) in out.iter_mut().zip(self.render_motifs(cfg)) {
            *o += m;
        }
        if cfg.noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
            let normal = Normal::new(0.0, cfg.noise_std).expect("validated noise std");
            for o in &mut out {
                *o += normal.sample(&mut rng);
            }
        }
        out
    }
}

/// Affine min–max map of the whole record onto `[0, 1]`; a constant record
/// becomes all 0.5. Returns `(min, max)` of the input.
pub fn min_max_normalize(data: &mut [f64]) -> (f64, f64) {
    let min = data.iter().copied().fold(f64::INFINITY, f64::min);
    let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        data.iter_mut().for_each(|v| *v = 0.5);
    } else {
        let range = max - min;
        data.iter_mut().for_each(|v| *v = ((*v - min) / range).clamp(0.0, 1.0));
    }
    (min, max)
}

pub fn generate_record(cfg: &CorpusConfig, split: Split, index: usize) -> SignalRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[split.tag(), index as u64]));
    let plan = plan_record(cfg, &mut rng);
    let mut data = plan.render_raw(cfg);
    min_max_normalize(&mut data);
    SignalRecord {
        id: format!("{}-{:05}", split.name(), index),
        signal: Signal::new(cfg.num_leads, cfg.signal_length, data)
            .expect("rendered signal has L*C samples"),
        labels: plan.labels,
        report: plan.report,
        evidence_map: plan.evidence_map,
    }
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    use rayon::prelude::*;
    cfg.validate()?;
    let gen = |split: Split, n: usize| -> Vec<SignalRecord> {
        (0..n)
            .into_par_iter()
            .map(|i| generate_record(cfg, split, i))
            .collect()
    };
    Ok(Corpus {
        config: cfg.clone(),
        train: gen(Split::Train, cfg.train_records),
        val: gen(Split::Val, cfg.val_records),
        test: gen(Split::Test, cfg.test_records),
    })
}

/// Canonical zero-shot prompt: the class's dedicated tokens in order, padded.
pub fn class_prompt(cls: usize, cfg: &CorpusConfig) -> Result<Vec<usize>> {
    if cls >= cfg.num_classes {
        return Err(Error::Input(format!(
            "class {cls} out of range for {} classes",
            cfg.num_classes
        )));
    }
    let mut tokens: Vec<usize> = cfg.class_tokens(cls).collect();
    tokens.resize(cfg.report_length.max(TOKENS_PER_CLASS), PAD_TOKEN);
    Ok(tokens)
}

// ------------------------------------------------------------------- io

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: CorpusConfig,
    pub counts: SplitCounts,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for split in Split::ALL {
        let path = dir.join(format!("{}.jsonl", split.name()));
        let mut w = BufWriter::new(File::create(path)?);
        for rec in corpus.split(split) {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    let manifest = Manifest {
        format_version: CORPUS_FORMAT_VERSION,
        seed: corpus.config.seed,
        config: corpus.config.clone(),
        counts: SplitCounts {
            train: corpus.train.len(),
            val: corpus.val.len(),
            test: corpus.test.len(),
        },
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Dependency(format!("corpus manifest {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported corpus format version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = read_manifest(dir)?;
    let read_split = |split: Split, expected: usize| -> Result<Vec<SignalRecord>> {
        let path = dir.join(format!("{}.jsonl", split.name()));
        let file = File::open(&path)
            .map_err(|e| Error::Dependency(format!("corpus split {}: {e}", path.display())))?;
        let mut out = Vec::with_capacity(expected);
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line)?);
        }
        if out.len() != expected {
            return Err(Error::Format(format!(
                "{} holds {} records, manifest says {expected}",
                path.display(),
                out.len()
            )));
        }
        Ok(out)
    };
    Ok(Corpus {
        train: read_split(Split::Train, manifest.counts.train)?,
        val: read_split(Split::Val, manifest.counts.val)?,
        test: read_split(Split::Test, manifest.counts.test)?,
        config: manifest.config,
    })
}
