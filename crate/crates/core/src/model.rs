//! The trainable components and how they are wired.
//!
//! * token encoder: one MLP shared by every patch, `h = φ(x)`
//! * masker: per-token logit MLP turned into Gumbel–Sigmoid gates
//! * selector: per-token score MLP, softmax over the visible set, weighted pool
//! * report encoder: mean of learned token embeddings (pads excluded) + MLP
//!
//! All forward functions take token lattices for a batch of `B` records with
//! `T = L·S` cells each and work on `B·T` stacked rows.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PAD_TOKEN;
use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::tokenizer::TokenGrid;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub text_hidden: usize,
    pub temperature: f64,
    pub mask_temperature_start: f64,
    pub mask_temperature_end: f64,
    pub budget: f64,
    pub pooling: Pooling,
}

/// How visible tokens are aggregated into the partial-view embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Selector,
    Mean,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            encoder_hidden: vec![64],
            head_hidden: vec![32],
            text_hidden: 64,
            temperature: 0.07,
            mask_temperature_start: 1.0,
            mask_temperature_end: 0.3,
            budget: 0.3,
            pooling: Pooling::Selector,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.text_hidden == 0 {
            return Err(Error::Config("embedding widths must be positive".into()));
        }
        if self.encoder_hidden.contains(&0) || self.head_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        if !(self.mask_temperature_start > 0.0 && self.mask_temperature_end > 0.0) {
            return Err(Error::Config("masking temperatures must be > 0".into()));
        }
        if !(self.budget > 0.0 && self.budget < 1.0) {
            return Err(Error::Config(format!("budget {} must lie in (0, 1)", self.budget)));
        }
        Ok(())
    }

    /// Linearly annealed masking temperature at `progress ∈ [0, 1]`.
    pub fn mask_temperature(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        self.mask_temperature_start + (self.mask_temperature_end - self.mask_temperature_start) * p
    }
}

/// Input extents the parameters are sized against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub patch_length: usize,
    pub vocab_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Enc,
    Mask,
    Sel,
    Text,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Enc, Group::Mask, Group::Sel, Group::Text];
    /// Everything the outer minimization updates.
    pub const ENCODER_SIDE: [Group; 3] = [Group::Enc, Group::Sel, Group::Text];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

/// Named parameter tensors, in a fixed order, each owned by one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScarParams {
    pub entries: Vec<ParamEntry>,
}

pub(crate) fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("sized by construction")
}

pub(crate) fn layer_widths(input: usize, hidden: &[usize], output: usize) -> Vec<(usize, usize)> {
    let mut widths = Vec::with_capacity(hidden.len() + 1);
    let mut prev = input;
    for &h in hidden.iter().chain(std::iter::once(&output)) {
        widths.push((prev, h));
        prev = h;
    }
    widths
}

impl ScarParams {
    pub fn init(cfg: &ModelConfig, dims: ModelDims, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        let mut mlp = |prefix: &str, group: Group, widths: Vec<(usize, usize)>, rng: &mut ChaCha8Rng| {
            for (i, (fi, fo)) in widths.into_iter().enumerate() {
                entries.push(ParamEntry {
                    name: format!("{prefix}.w{i}"),
                    group,
                    value: xavier(rng, fi, fo),
                });
                entries.push(ParamEntry {
                    name: format!("{prefix}.b{i}"),
                    group,
                    value: Tensor::zeros(&[fo]),
                });
            }
        };
        let d = cfg.embed_dim;
        mlp("enc", Group::Enc, layer_widths(dims.patch_length, &cfg.encoder_hidden, d), &mut rng);
        mlp("mask", Group::Mask, layer_widths(d, &cfg.head_hidden, 1), &mut rng);
        mlp("sel", Group::Sel, layer_widths(d, &cfg.head_hidden, 1), &mut rng);
        let emb = {
            let a = (3.0f64).sqrt();
            let data = (0..dims.vocab_size * d).map(|_| rng.gen_range(-a..a)).collect();
            Tensor::matrix(dims.vocab_size, d, data)?
        };
        entries.push(ParamEntry {
            name: "text.emb".into(),
            group: Group::Text,
            value: emb,
        });
        mlp_text(&mut entries, cfg, &mut rng);
        Ok(Self { entries })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.value)
    }

    pub fn group_len(&self, group: Group) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Hash of the exact bit patterns of one group's values.
    pub fn checksum(&self, group: Group) -> u64 {
        let mut h = DefaultHasher::new();
        for e in self.entries.iter().filter(|e| e.group == group) {
            e.name.hash(&mut h);
            for v in e.value.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    fn mlp_layers(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix) && e.name[prefix.len()..].starts_with(".w"))
            .count()
    }

    /// Puts every parameter on `tape`; only groups in `trainable` get gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: &[Group]) -> Bound {
        let ids = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), trainable.contains(&e.group)))
            .collect();
        Bound {
            ids,
            names: self.entries.iter().map(|e| e.name.clone()).collect(),
            enc_layers: self.mlp_layers("enc"),
            mask_layers: self.mlp_layers("mask"),
            sel_layers: self.mlp_layers("sel"),
            text_layers: self.mlp_layers("text"),
        }
    }

    /// Validates shapes against `cfg` and `dims` (fresh init is the template).
    pub fn check_shapes(&self, cfg: &ModelConfig, dims: ModelDims) -> Result<()> {
        let template = ScarParams::init(cfg, dims, 0)?;
        if template.entries.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, config expects {}",
                self.entries.len(),
                template.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&template.entries) {
            if a.name != b.name || a.group != b.group || a.value.shape() != b.value.shape() {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }
}

fn mlp_text(entries: &mut Vec<ParamEntry>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let widths = layer_widths(cfg.embed_dim, &[cfg.text_hidden], cfg.embed_dim);
    for (i, (fi, fo)) in widths.into_iter().enumerate() {
        entries.push(ParamEntry {
            name: format!("text.w{i}"),
            group: Group::Text,
            value: xavier(rng, fi, fo),
        });
        entries.push(ParamEntry {
            name: format!("text.b{i}"),
            group: Group::Text,
            value: Tensor::zeros(&[fo]),
        });
    }
}

/// Node ids of a parameter set bound to one tape.
pub struct Bound {
    pub ids: Vec<NodeId>,
    names: Vec<String>,
    enc_layers: usize,
    mask_layers: usize,
    sel_layers: usize,
    text_layers: usize,
}

impl Bound {
    pub fn id(&self, name: &str) -> NodeId {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.ids[i]
    }

    /// Applies the MLP whose layers are named `{prefix}.w{i}`, `{prefix}.b{i}`.
    pub fn mlp_named(&self, tape: &mut Tape, prefix: &str, x: NodeId) -> Result<NodeId> {
        let head = format!("{prefix}.w");
        let layers = self.names.iter().filter(|n| n.starts_with(&head)).count();
        self.mlp(tape, prefix, layers, x)
    }

    fn mlp(&self, tape: &mut Tape, prefix: &str, layers: usize, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for i in 0..layers {
            let w = self.id(&format!("{prefix}.w{i}"));
            let b = self.id(&format!("{prefix}.b{i}"));
            h = tape.matmul(h, w)?;
            h = tape.add_bias(h, b)?;
            if i + 1 < layers {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }
}

/// Stacked patches and validity of a batch of lattices.
pub struct BatchInput {
    pub records: usize,
    pub cells: usize,
    pub patches: Tensor,
    pub valid: Vec<bool>,
}

impl BatchInput {
    pub fn new(grids: &[&TokenGrid]) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| Error::Input("empty batch".into()))?;
        let cells = first.num_cells();
        let p = first.patch_length;
        let mut data = Vec::with_capacity(grids.len() * cells * p);
        let mut valid = Vec::with_capacity(grids.len() * cells);
        for g in grids {
            if g.num_cells() != cells || g.patch_length != p {
                return Err(Error::Dimension("batch mixes lattice shapes".into()));
            }
            data.extend_from_slice(&g.data);
            valid.extend_from_slice(&g.cell_valid);
        }
        Ok(Self {
            records: grids.len(),
            cells,
            patches: Tensor::matrix(grids.len() * cells, p, data)?,
            valid,
        })
    }
}

/// `H`: shared encoder applied to every patch, `[B·T × d]`.
pub fn encode_tokens(tape: &mut Tape, bound: &Bound, input: &BatchInput) -> Result<NodeId> {
    let x = tape.constant(input.patches.clone());
    bound.mlp(tape, "enc", bound.enc_layers, x)
}

/// Masker logits `f_mask(h)`, `[B·T]`.
pub fn mask_logits(tape: &mut Tape, bound: &Bound, h: NodeId) -> Result<NodeId> {
    let l = bound.mlp(tape, "mask", bound.mask_layers, h)?;
    let n = tape.value(l).numel();
    tape.reshape(l, &[n])
}

/// Standard Gumbel(0, 1) draws.
pub fn gumbel_noise(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Gates `g ∈ (0,1)` per token. In train mode `σ((f_mask(h) + ε) / τ_m)`;
/// otherwise hard `1[f_mask(h) > 0]`. Invalid cells are forced to 1.
pub fn adversarial_gates(
    tape: &mut Tape,
    bound: &Bound,
    h: NodeId,
    mask_temperature: f64,
    noise: &[f64],
    valid: &[bool],
    train_mode: bool,
) -> Result<NodeId> {
    if !(mask_temperature > 0.0) {
        return Err(Error::Config(format!(
            "masking temperature {mask_temperature} must be > 0"
        )));
    }
    let logits = mask_logits(tape, bound, h)?;
    let n = tape.value(logits).numel();
    if valid.len() != n || (train_mode && noise.len() != n) {
        return Err(Error::Dimension(format!(
            "{n} gates with {} noise draws and {} validity flags",
            noise.len(),
            valid.len()
        )));
    }
    let keep = Tensor::vector(valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect());
    let forced = Tensor::vector(valid.iter().map(|&v| if v { 0.0 } else { 1.0 }).collect());
    if !train_mode {
        let hard: Vec<f64> = tape
            .value(logits)
            .data()
            .iter()
            .zip(valid)
            .map(|(&l, &v)| if !v || l > 0.0 { 1.0 } else { 0.0 })
            .collect();
        return Ok(tape.constant(Tensor::vector(hard)));
    }
    let eps = tape.constant(Tensor::vector(noise.to_vec()));
    let pre = tape.add(logits, eps)?;
    let pre = tape.scale(pre, 1.0 / mask_temperature);
    let g = tape.sigmoid(pre);
    let keep = tape.constant(keep);
    let forced = tape.constant(forced);
    let g = tape.mul(g, keep)?;
    tape.add(g, forced)
}

/// `ĥ = (1 − g) · h`, gate broadcast over the embedding.
pub fn mask_tokens(tape: &mut Tape, h: NodeId, g: NodeId) -> Result<NodeId> {
    let neg = tape.scale(g, -1.0);
    let keep = tape.add_const(neg, 1.0);
    tape.scale_rows(h, keep)
}

/// Selector scores `a = f_sel(ĥ)` reshaped to `[B × T]`.
pub fn selector_scores(
    tape: &mut Tape,
    bound: &Bound,
    h_hat: NodeId,
    records: usize,
    cells: usize,
) -> Result<NodeId> {
    let a = bound.mlp(tape, "sel", bound.sel_layers, h_hat)?;
    tape.reshape(a, &[records, cells])
}

/// Softmax of selector scores over each record's visible set, then the
/// weighted sum of `ĥ`. Returns `(α [B×T], z [B×d])`.
pub fn select_and_pool(
    tape: &mut Tape,
    bound: &Bound,
    h_hat: NodeId,
    visible: &[bool],
    records: usize,
    cells: usize,
) -> Result<(NodeId, NodeId)> {
    ensure_visible(visible, records, cells)?;
    let a = selector_scores(tape, bound, h_hat, records, cells)?;
    let alpha = tape.softmax_over_set(a, visible)?;
    let z = tape.segment_pool(alpha, h_hat)?;
    Ok((alpha, z))
}

/// Uniform weights over each record's visible set, then the weighted sum.
pub fn mean_pool(
    tape: &mut Tape,
    x: NodeId,
    visible: &[bool],
    records: usize,
    cells: usize,
) -> Result<(NodeId, NodeId)> {
    ensure_visible(visible, records, cells)?;
    let mut w = vec![0.0; records * cells];
    for r in 0..records {
        let row = &visible[r * cells..(r + 1) * cells];
        let n = row.iter().filter(|&&v| v).count() as f64;
        for (j, &v) in row.iter().enumerate() {
            if v {
                w[r * cells + j] = 1.0 / n;
            }
        }
    }
    let alpha = tape.constant(Tensor::matrix(records, cells, w)?);
    let z = tape.segment_pool(alpha, x)?;
    Ok((alpha, z))
}

/// Selector-free mean over the valid cells of the unmasked tokens.
pub fn full_view_embed(
    tape: &mut Tape,
    h: NodeId,
    valid: &[bool],
    records: usize,
    cells: usize,
) -> Result<NodeId> {
    mean_pool(tape, h, valid, records, cells).map(|(_, z)| z)
}

fn ensure_visible(visible: &[bool], records: usize, cells: usize) -> Result<()> {
    if visible.len() != records * cells {
        return Err(Error::Dimension(format!(
            "{} visibility flags for {records}x{cells} cells",
            visible.len()
        )));
    }
    if visible.chunks(cells.max(1)).any(|row| !row.iter().any(|&v| v)) {
        return Err(Error::AllMasked);
    }
    Ok(())
}

/// Report embeddings `[B × d]`: mean of non-pad token embeddings, then MLP.
pub fn encode_report(
    tape: &mut Tape,
    bound: &Bound,
    reports: &[&[usize]],
    vocab_size: usize,
) -> Result<NodeId> {
    let mut weights = vec![0.0; reports.len() * vocab_size];
    for (r, tokens) in reports.iter().enumerate() {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Encoding {
                id: bad,
                vocab: vocab_size,
            });
        }
        let n = tokens.iter().filter(|&&t| t != PAD_TOKEN).count();
        for &t in tokens.iter().filter(|&&t| t != PAD_TOKEN) {
            weights[r * vocab_size + t] += 1.0 / n as f64;
        }
    }
    let counts = tape.constant(Tensor::matrix(reports.len(), vocab_size, weights)?);
    let emb = bound.id("text.emb");
    let mean = tape.matmul(counts, emb)?;
    bound.mlp(tape, "text", bound.text_layers, mean)
}

// ----------------------------------------------------------- checkpoint

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub dims: ModelDims,
    pub step: u64,
    pub params: ScarParams,
}

impl Checkpoint {
    pub fn new(model_config: ModelConfig, dims: ModelDims, step: u64, params: ScarParams) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            model_config,
            dims,
            step,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Dependency(format!("checkpoint {}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                ckpt.format_version
            )));
        }
        ckpt.params.check_shapes(&ckpt.model_config, ckpt.dims)?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Signal;
    use crate::tokenizer::patchify;

    fn dims() -> ModelDims {
        ModelDims {
            patch_length: 5,
            vocab_size: 12,
        }
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            encoder_hidden: vec![6],
            head_hidden: vec![3],
            text_hidden: 5,
            ..ModelConfig::default()
        }
    }

    fn grid(seed: u64) -> TokenGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..2 * 15).map(|_| rng.gen_range(0.0..1.0)).collect();
        patchify(&Signal::new(2, 15, data).unwrap(), 5).unwrap()
    }

    #[test]
    fn default_shapes() {
        let p = ScarParams::init(
            &ModelConfig::default(),
            ModelDims {
                patch_length: 50,
                vocab_size: 64,
            },
            0,
        )
        .unwrap();
        let g = patchify(&Signal::new(12, 500, vec![0.3; 6000]).unwrap(), 50).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, &[]);
        let input = BatchInput::new(&[&g]).unwrap();
        let h = encode_tokens(&mut tape, &b, &input).unwrap();
        assert_eq!(tape.value(h).shape(), &[120, 32]);
        // identical (here: constant) patches share one embedding
        let hv = tape.value(h);
        assert!(hv.row(0) == hv.row(119));
    }

    #[test]
    fn encoder_commutes_with_patch_permutation() {
        let p = ScarParams::init(&tiny_cfg(), dims(), 1).unwrap();
        let g = grid(3);
        let mut swapped = g.clone();
        let (a, b) = (1, 4);
        for i in 0..5 {
            swapped.data.swap(a * 5 + i, b * 5 + i);
        }
        let mut tape = Tape::new();
        let bd = p.bind(&mut tape, &[]);
        let h1 = encode_tokens(&mut tape, &bd, &BatchInput::new(&[&g]).unwrap()).unwrap();
        let h2 = encode_tokens(&mut tape, &bd, &BatchInput::new(&[&swapped]).unwrap()).unwrap();
        let (v1, v2) = (tape.value(h1), tape.value(h2));
        assert_eq!(v1.row(a), v2.row(b));
        assert_eq!(v1.row(b), v2.row(a));
        assert_eq!(v1.row(0), v2.row(0));
    }

    #[test]
    fn gate_edge_values() {
        let p = ScarParams::init(&tiny_cfg(), dims(), 2).unwrap();
        let mut p0 = p.clone();
        // zero masker output: last layer weights and bias at 0
        p0.get_mut("mask.w1").unwrap().data_mut().fill(0.0);
        let mut tape = Tape::new();
        let bd = p0.bind(&mut tape, &[]);
        let input = BatchInput::new(&[&grid(1)]).unwrap();
        let h = encode_tokens(&mut tape, &bd, &input).unwrap();
        let g = adversarial_gates(&mut tape, &bd, h, 1.0, &[0.0; 6], &[true; 6], true).unwrap();
        assert!(tape.value(g).data().iter().all(|&v| v == 0.5));

        // logit 2, no noise, tiny temperature saturates
        p0.get_mut("mask.b1").unwrap().data_mut()[0] = 2.0;
        let mut tape = Tape::new();
        let bd = p0.bind(&mut tape, &[]);
        let h = encode_tokens(&mut tape, &bd, &input).unwrap();
        let valid = [true, true, false, true, true, true];
        let g = adversarial_gates(&mut tape, &bd, h, 0.01, &[0.0; 6], &valid, true).unwrap();
        assert!(tape.value(g).data().iter().all(|&v| v > 1.0 - 1e-3));
        assert_eq!(tape.value(g).data()[2], 1.0);
    }

    #[test]
    fn mask_tokens_linear_in_gate() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap());
        for (gv, factor) in [(0.0, 1.0), (1.0, 0.0), (0.5, 0.5)] {
            let g = tape.constant(Tensor::vector(vec![gv, gv]));
            let hh = mask_tokens(&mut tape, h, g).unwrap();
            let expect = tape.value(h).map(|v| v * factor);
            assert_eq!(tape.value(hh), &expect);
        }
    }

    #[test]
    fn pooling_contracts() {
        let p = ScarParams::init(&tiny_cfg(), dims(), 4).unwrap();
        let mut tape = Tape::new();
        let bd = p.bind(&mut tape, &[]);
        let input = BatchInput::new(&[&grid(5)]).unwrap();
        let h = encode_tokens(&mut tape, &bd, &input).unwrap();

        // single visible cell: z equals that token
        let mut vis = vec![false; 6];
        vis[3] = true;
        let (_, z) = select_and_pool(&mut tape, &bd, h, &vis, 1, 6).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(h).row(3));

        // empty visible set is surfaced
        assert!(matches!(
            select_and_pool(&mut tape, &bd, h, &[false; 6], 1, 6),
            Err(Error::AllMasked)
        ));

        // shifting every selector score leaves z unchanged
        let (_, z0) = select_and_pool(&mut tape, &bd, h, &[true; 6], 1, 6).unwrap();
        let z0 = tape.value(z0).clone();
        let mut shifted = p.clone();
        shifted.get_mut("sel.b1").unwrap().data_mut()[0] += 7.5;
        let mut t2 = Tape::new();
        let b2 = shifted.bind(&mut t2, &[]);
        let h2 = encode_tokens(&mut t2, &b2, &input).unwrap();
        let (_, z1) = select_and_pool(&mut t2, &b2, h2, &[true; 6], 1, 6).unwrap();
        assert!(t2.value(z1).max_abs_diff(&z0) < 1e-10);

        // uniform selector scores reduce to the mean
        let mut flat = p.clone();
        flat.get_mut("sel.w1").unwrap().data_mut().fill(0.0);
        let mut t3 = Tape::new();
        let b3 = flat.bind(&mut t3, &[]);
        let h3 = encode_tokens(&mut t3, &b3, &input).unwrap();
        let (_, zs) = select_and_pool(&mut t3, &b3, h3, &vis_all_but(0), 1, 6).unwrap();
        let (_, zm) = mean_pool(&mut t3, h3, &vis_all_but(0), 1, 6).unwrap();
        assert!(t3.value(zs).max_abs_diff(t3.value(zm)) < 1e-12);
    }

    fn vis_all_but(i: usize) -> Vec<bool> {
        (0..6).map(|j| j != i).collect()
    }

    #[test]
    fn full_view_of_single_cell_is_that_token() {
        let p = ScarParams::init(&tiny_cfg(), dims(), 6).unwrap();
        let g = patchify(&Signal::new(1, 5, vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap(), 5).unwrap();
        let mut tape = Tape::new();
        let bd = p.bind(&mut tape, &[]);
        let input = BatchInput::new(&[&g]).unwrap();
        let h = encode_tokens(&mut tape, &bd, &input).unwrap();
        let z = full_view_embed(&mut tape, h, &[true], 1, 1).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(h).data());
    }

    #[test]
    fn report_encoder_contracts() {
        let p = ScarParams::init(&tiny_cfg(), dims(), 7).unwrap();
        let mut tape = Tape::new();
        let bd = p.bind(&mut tape, &[]);
        let a: &[usize] = &[1, 2, 3, 0, 0];
        let a_perm: &[usize] = &[0, 3, 1, 0, 2];
        let pad: &[usize] = &[0, 0, 0, 0, 0];
        let other: &[usize] = &[5, 6, 7, 0, 0];
        let u = encode_report(&mut tape, &bd, &[a, a_perm, pad, other], 12).unwrap();
        let uv = tape.value(u).clone();
        assert!(Tensor::vector(uv.row(0).to_vec()).max_abs_diff(&Tensor::vector(uv.row(1).to_vec())) < 1e-15);
        // all-pad: zero mean, so the output is the bias path of the MLP
        let b0 = p.get("text.b0").unwrap().data().iter().map(|v| v.tanh()).collect::<Vec<_>>();
        let w1 = p.get("text.w1").unwrap();
        let b1 = p.get("text.b1").unwrap();
        let expect = crate::tensor::matmul(&Tensor::matrix(1, 5, b0).unwrap(), w1).unwrap();
        for j in 0..4 {
            assert!((uv.row(2)[j] - expect.data()[j] - b1.data()[j]).abs() < 1e-15);
        }
        let c = crate::graph::cosine(uv.row(0), uv.row(3)).unwrap();
        assert!(c < 1.0);
        assert!(matches!(
            encode_report(&mut tape, &bd, &[&[1, 12]], 12),
            Err(Error::Encoding { id: 12, .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let cfg = tiny_cfg();
        let p = ScarParams::init(&cfg, dims(), 8).unwrap();
        let ck = Checkpoint::new(cfg.clone(), dims(), 42, p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);

        let mut wrong = ck.clone();
        wrong.model_config.embed_dim = 5;
        wrong.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn groups_are_disjoint_and_cover_everything() {
        let p = ScarParams::init(&tiny_cfg(), dims(), 9).unwrap();
        let total: usize = Group::ALL.iter().map(|&g| p.group_len(g)).sum();
        assert_eq!(total, p.num_params());
        assert!(Group::ALL.iter().all(|&g| p.group_len(g) > 0));
    }
}
