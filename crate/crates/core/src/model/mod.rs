//! The multi-modal masked autoencoder: per-modality patch tokenizers, a
//! shared pre-norm transformer encoder with attention blocking, and one
//! light reconstruction decoder per modality.
//!
//! Token layout is fixed: `[CLS | T1 patches | T2 | FLAIR | PET]`, so
//! modality `m`'s patch `i` always sits at slot `1 + index(m) * N + i`.
//! Masked and missing slots hold zeros and are excluded from attention.

mod posenc;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::modality::{Modality, ModalitySet};
use crate::params::{trunc_normal, xavier_uniform, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Mat;
use crate::volume::{PatchGrid, Shape3};

pub use posenc::positional_embedding_3d;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    /// One cross-attention block followed by `decoder_blocks - 1`
    /// self-attention blocks.
    pub decoder_blocks: usize,
    pub patch_size: usize,
    pub volume_shape: Shape3,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// CPU-sized preset: 32^3 volumes, 8^3 patches (64 per modality).
    pub fn desk() -> ModelConfig {
        ModelConfig {
            dim: 64,
            heads: 4,
            layers: 4,
            mlp_ratio: 4,
            decoder_dim: 32,
            decoder_heads: 4,
            decoder_blocks: 2,
            patch_size: 8,
            volume_shape: Shape3::cube(32),
            dropout: 0.0,
        }
    }

    /// ViT-B sized preset on 128^3 volumes with 16^3 patches.
    pub fn base() -> ModelConfig {
        ModelConfig {
            dim: 768,
            heads: 12,
            layers: 12,
            mlp_ratio: 4,
            decoder_dim: 384,
            decoder_heads: 12,
            decoder_blocks: 2,
            patch_size: 16,
            volume_shape: Shape3::cube(128),
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.decoder_dim == 0 || self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return Err(Error::Config("decoder dim not divisible by decoder heads".into()));
        }
        if self.layers == 0 || self.decoder_blocks == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        self.grid().map(|_| ())
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.volume_shape, self.patch_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Pre-norm transformer block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Block {
    pub norm1: Norm,
    pub attn: AttentionParams,
    pub norm2: Norm,
    pub mlp: Mlp,
}

/// Queries from mask/visible slots attend to encoder outputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossBlock {
    pub norm_q: Norm,
    pub norm_kv: Norm,
    pub attn: AttentionParams,
    pub norm2: Norm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub tokenizers: [Linear; 4],
    pub cls: ParamId,
    pub blocks: Vec<Block>,
    pub norm: Norm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub embed: Linear,
    pub mask_token: ParamId,
    pub pos: ParamId,
    pub cross: CrossBlock,
    pub blocks: Vec<Block>,
    pub norm: Norm,
    pub head: Linear,
}

/// Cross-modal predictors `MRI -> PET` and `PET -> MRI`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RcmdHeads {
    pub mri_to_pet: Mlp,
    pub pet_to_mri: Mlp,
}

/// Layer norm + linear on the CLS output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskHead {
    pub norm: Norm,
    pub linear: Linear,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = xavier_uniform(fan_in, fan_out, self.rng);
        Linear { w: self.store.add(format!("{name}.weight"), w), b: self.store.add(format!("{name}.bias"), Mat::zeros(1, fan_out)) }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gamma: self.store.add(format!("{name}.weight"), Mat::filled(1, dim, 1.0)),
            beta: self.store.add(format!("{name}.bias"), Mat::zeros(1, dim)),
        }
    }

    fn attention(&mut self, name: &str, dim: usize) -> AttentionParams {
        AttentionParams {
            q: self.linear(&format!("{name}.q"), dim, dim),
            k: self.linear(&format!("{name}.k"), dim, dim),
            v: self.linear(&format!("{name}.v"), dim, dim),
            out: self.linear(&format!("{name}.out"), dim, dim),
        }
    }

    fn mlp(&mut self, name: &str, dim: usize, hidden: usize, out: usize) -> Mlp {
        Mlp { fc1: self.linear(&format!("{name}.fc1"), dim, hidden), fc2: self.linear(&format!("{name}.fc2"), hidden, out) }
    }

    fn block(&mut self, name: &str, dim: usize, ratio: usize) -> Block {
        Block {
            norm1: self.norm(&format!("{name}.norm1"), dim),
            attn: self.attention(&format!("{name}.attn"), dim),
            norm2: self.norm(&format!("{name}.norm2"), dim),
            mlp: self.mlp(&format!("{name}.mlp"), dim, dim * ratio, dim),
        }
    }
}

/// Student network: encoder, decoders, cross-modal predictors and optional
/// task head, all in one parameter store.
///
/// Encoder parameters occupy ids `0..n_encoder_params`, so
/// `store.prefix(n_encoder_params)` is a valid teacher store for the same
/// [`EncoderParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub grid: PatchGrid,
    pub pos: Mat,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub n_encoder_params: usize,
    pub decoders: Vec<DecoderParams>,
    pub rcmd: RcmdHeads,
    pub task_head: Option<TaskHead>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Model> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let (d, n, pl) = (cfg.dim, grid.n_patches(), grid.patch_len());
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng };
        let tokenizers = Modality::ALL.map(|m| b.linear(&format!("encoder.tokenizer.{}", m.key()), pl, d));
        let cls_init = trunc_normal(1, d, 0.02, b.rng);
        let cls = b.store.add("encoder.cls", cls_init);
        let blocks = (0..cfg.layers).map(|l| b.block(&format!("encoder.blocks.{l}"), d, cfg.mlp_ratio)).collect();
        let norm = b.norm("encoder.norm", d);
        let encoder = EncoderParams { tokenizers, cls, blocks, norm };
        let n_encoder_params = b.store.len();

        let dd = cfg.decoder_dim;
        let mut decoders = Vec::with_capacity(4);
        for m in Modality::ALL {
            let base = format!("decoder.{}", m.key());
            let embed = b.linear(&format!("{base}.embed"), d, dd);
            let mask_init = trunc_normal(1, dd, 0.02, b.rng);
            let mask_token = b.store.add(format!("{base}.mask_token"), mask_init);
            let pos_init = trunc_normal(n, dd, 0.02, b.rng);
            let pos = b.store.add(format!("{base}.pos"), pos_init);
            let cross = CrossBlock {
                norm_q: b.norm(&format!("{base}.cross.norm_q"), dd),
                norm_kv: b.norm(&format!("{base}.cross.norm_kv"), dd),
                attn: b.attention(&format!("{base}.cross.attn"), dd),
                norm2: b.norm(&format!("{base}.cross.norm2"), dd),
                mlp: b.mlp(&format!("{base}.cross.mlp"), dd, dd * cfg.mlp_ratio, dd),
            };
            let blocks = (1..cfg.decoder_blocks).map(|j| b.block(&format!("{base}.blocks.{j}"), dd, cfg.mlp_ratio)).collect();
            let norm = b.norm(&format!("{base}.norm"), dd);
            let head = b.linear(&format!("{base}.head"), dd, pl);
            decoders.push(DecoderParams { embed, mask_token, pos, cross, blocks, norm, head });
        }
        let rcmd = RcmdHeads {
            mri_to_pet: b.mlp("rcmd.mri_to_pet", d, 2 * d, d),
            pet_to_mri: b.mlp("rcmd.pet_to_mri", d, 2 * d, d),
        };
        Ok(Model { cfg: cfg.clone(), grid, pos: positional_embedding_3d(&grid, d), store, encoder, n_encoder_params, decoders, rcmd, task_head: None })
    }

    /// Appends a fresh task head (`head.norm`, `head.linear`) if absent.
    pub fn ensure_task_head(&mut self, rng: &mut Rng) -> TaskHead {
        if let Some(h) = self.task_head {
            return h;
        }
        let d = self.cfg.dim;
        let mut b = Builder { store: &mut self.store, rng };
        let norm = b.norm("head.norm", d);
        let w = trunc_normal(d, 1, 0.02, b.rng);
        let linear = Linear { w: b.store.add("head.linear.weight", w), b: b.store.add("head.linear.bias", Mat::zeros(1, 1)) };
        let head = TaskHead { norm, linear };
        self.task_head = Some(head);
        head
    }

    /// Rebinds a task head that is already present in the store (after
    /// loading a checkpoint).
    pub fn bind_task_head(&mut self) -> Option<TaskHead> {
        let s = &self.store;
        let head = TaskHead {
            norm: Norm { gamma: s.find("head.norm.weight")?, beta: s.find("head.norm.bias")? },
            linear: Linear { w: s.find("head.linear.weight")?, b: s.find("head.linear.bias")? },
        };
        self.task_head = Some(head);
        Some(head)
    }

    pub fn n_patches(&self) -> usize {
        self.grid.n_patches()
    }

    /// Sequence length of the fixed layout.
    pub fn seq_len(&self) -> usize {
        1 + Modality::COUNT * self.n_patches()
    }

    pub fn slot(&self, m: Modality, patch: usize) -> usize {
        1 + m.index() * self.n_patches() + patch
    }

    /// Teacher-shaped copy of the encoder parameters.
    pub fn encoder_store(&self) -> ParamStore {
        self.store.prefix(self.n_encoder_params)
    }

    pub fn encoder_param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.n_encoder_params).map(ParamId)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.store.iter().map(|(_, p)| String::from(p.name.as_str())).collect()
    }
}

/// Per-call forward settings: which store to read, whether its parameters
/// are trainable, and dropout state.
pub struct Fwd<'a> {
    pub g: &'a mut Graph,
    pub store: &'a ParamStore,
    pub trainable: bool,
    pub dropout: Option<(f64, &'a mut Rng)>,
}

impl<'a> Fwd<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore, trainable: bool) -> Fwd<'a> {
        Fwd { g, store, trainable, dropout: None }
    }

    fn p(&mut self, id: ParamId) -> Var {
        if self.trainable {
            self.g.param(self.store, id)
        } else {
            self.g.frozen(self.store, id)
        }
    }

    fn linear(&mut self, x: Var, l: Linear) -> Var {
        let (w, b) = (self.p(l.w), self.p(l.b));
        self.g.linear(x, w, Some(b))
    }

    fn norm(&mut self, x: Var, n: Norm) -> Var {
        let (g, b) = (self.p(n.gamma), self.p(n.beta));
        self.g.layer_norm(x, g, b)
    }

    fn drop(&mut self, x: Var) -> Var {
        let Some((rate, rng)) = self.dropout.as_mut() else { return x };
        if *rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - *rate);
        let len = self.g.value(x).len();
        let mask = (0..len).map(|_| if rng.random::<f64>() < *rate { 0.0 } else { keep }).collect();
        self.g.dropout(x, mask)
    }

    fn mlp(&mut self, x: Var, m: Mlp) -> Var {
        let h = self.linear(x, m.fc1);
        let h = self.g.gelu(h);
        self.linear(h, m.fc2)
    }

    /// Returns the block output and its attention node.
    fn block(&mut self, x: Var, b: &Block, heads: usize, keys: Option<&[usize]>) -> (Var, Var) {
        let n = self.norm(x, b.norm1);
        let (q, k, v) = (self.linear(n, b.attn.q), self.linear(n, b.attn.k), self.linear(n, b.attn.v));
        let att = self.g.attention(q, k, v, heads, keys.map(<[usize]>::to_vec));
        let o = self.linear(att, b.attn.out);
        let o = self.drop(o);
        let h = self.g.add(x, o);
        let n2 = self.norm(h, b.norm2);
        let f = self.mlp(n2, b.mlp);
        let f = self.drop(f);
        (self.g.add(h, f), att)
    }
}

/// Patches of one subject, `N x p^3` per present modality.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SamplePatches {
    pub patches: [Option<Mat>; 4],
}

impl SamplePatches {
    pub fn get(&self, m: Modality) -> Option<&Mat> {
        self.patches[m.index()].as_ref()
    }

    pub fn present(&self) -> ModalitySet {
        Modality::ALL.into_iter().filter(|m| self.patches[m.index()].is_some()).collect()
    }
}

/// Encoder input in the fixed layout.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub tokens: Var,
    /// Participating slots, ascending; always starts with the CLS slot 0.
    pub included: Vec<usize>,
    pub participates: Vec<bool>,
    pub n_patches: usize,
}

impl TokenBatch {
    /// `(modality, patch)` for a non-CLS slot.
    pub fn provenance(&self, slot: usize) -> Option<(Modality, usize)> {
        if slot == 0 || slot > Modality::COUNT * self.n_patches {
            return None;
        }
        let s = slot - 1;
        Modality::from_index(s / self.n_patches).map(|m| (m, s % self.n_patches))
    }

    /// Included slots belonging to `m`.
    pub fn included_of(&self, m: Modality) -> Vec<usize> {
        self.included.iter().copied().filter(|&s| self.provenance(s).is_some_and(|(mm, _)| mm == m)).collect()
    }
}

/// Projects visible patches and places them at their layout slots with
/// positional embeddings added. Masked and missing slots stay zero and are
/// excluded; CLS always participates.
pub fn tokenize(fwd: &mut Fwd<'_>, model: &Model, sample: &SamplePatches, plan: &MaskPlan) -> Result<TokenBatch> {
    let n = model.n_patches();
    let (d, len) = (model.cfg.dim, model.seq_len());
    if plan.n_patches != n {
        return Err(Error::Internal("mask plan patch count differs from the model grid".into()));
    }
    let cls = fwd.p(model.encoder.cls);
    let mut parts = vec![(cls, vec![0usize])];
    let mut participates = vec![false; len];
    participates[0] = true;
    for m in Modality::ALL {
        let visible = plan.visible(m);
        if visible.is_empty() {
            continue;
        }
        let patches = sample
            .get(m)
            .ok_or_else(|| Error::Internal(format!("plan shows visible {m} patches but the sample has no {m} volume")))?;
        let x = fwd.g.constant(patches.gather_rows(visible));
        let tok = fwd.linear(x, model.encoder.tokenizers[m.index()]);
        let pos = fwd.g.constant(model.pos.gather_rows(visible));
        let tok = fwd.g.add(tok, pos);
        let slots: Vec<usize> = visible.iter().map(|&i| model.slot(m, i)).collect();
        slots.iter().for_each(|&s| participates[s] = true);
        parts.push((tok, slots));
    }
    let tokens = fwd.g.scatter_rows(len, d, parts);
    let included = (0..len).filter(|&s| participates[s]).collect();
    Ok(TokenBatch { tokens, included, participates, n_patches: n })
}

/// How excluded slots are kept out of attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EncodeMode {
    /// Full layout; every query row only sees included keys.
    Blocked,
    /// Only included rows are computed, then scattered back into the layout.
    /// Equivalent to `Blocked` at included slots and much cheaper.
    #[default]
    Compacted,
}

/// Encoder result: full-layout outputs (rows of excluded slots are
/// meaningless) plus each layer's attention node.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub out: Var,
    pub attention: Vec<Var>,
    /// Layout slot of each attention key column.
    pub key_slots: Vec<usize>,
}

pub fn encode(fwd: &mut Fwd<'_>, model: &Model, batch: &TokenBatch) -> Result<Encoded> {
    encode_with(fwd, model, batch, EncodeMode::default())
}

/// Runs the shared encoder. Excluded slots neither attend to nor are
/// attended by anything.
pub fn encode_with(fwd: &mut Fwd<'_>, model: &Model, batch: &TokenBatch, mode: EncodeMode) -> Result<Encoded> {
    if batch.included.len() < 2 {
        return Err(Error::DegenerateInput("no patch token participates in attention".into()));
    }
    let all = batch.included.len() == batch.participates.len();
    let mut attention = Vec::with_capacity(model.encoder.blocks.len());
    let (mut x, keys) = match mode {
        EncodeMode::Blocked if !all => (batch.tokens, Some(batch.included.as_slice())),
        EncodeMode::Compacted if !all => (fwd.g.gather_rows(batch.tokens, batch.included.clone()), None),
        _ => (batch.tokens, None),
    };
    for b in &model.encoder.blocks {
        let (y, att) = fwd.block(x, b, model.cfg.heads, keys);
        x = y;
        attention.push(att);
    }
    let mut out = fwd.norm(x, model.encoder.norm);
    if mode == EncodeMode::Compacted && !all {
        out = fwd.g.scatter_rows(batch.participates.len(), model.cfg.dim, vec![(out, batch.included.clone())]);
    }
    Ok(Encoded { out, attention, key_slots: batch.included.clone() })
}

/// CLS-to-slot attention of layer `layer`, averaged over heads, as a
/// full-layout vector (zeros at excluded slots).
pub fn cls_attention(g: &Graph, enc: &Encoded, layer: usize, seq_len: usize) -> Vec<f64> {
    let (probs, _) = g.attention_probs(enc.attention[layer]).expect("attention node");
    let mut out = vec![0.0; seq_len];
    let h = probs.len() as f64;
    for p in probs {
        let row = p.row(0);
        let mapped = row.len() == enc.key_slots.len();
        for (c, v) in row.iter().enumerate() {
            let slot = if mapped { enc.key_slots[c] } else { c };
            out[slot] += v / h;
        }
    }
    out
}

/// Reconstructs all `N` patches of modality `m` (`N x p^3`).
///
/// Queries are the projected encoder outputs at `m`'s visible slots and
/// the learned mask token elsewhere, plus learned positions; they
/// cross-attend to the included encoder outputs only.
pub fn decode_modality(fwd: &mut Fwd<'_>, model: &Model, enc: &Encoded, batch: &TokenBatch, m: Modality) -> Var {
    let dec = &model.decoders[m.index()];
    let n = model.n_patches();
    let dd = model.cfg.decoder_dim;
    let included = fwd.g.gather_rows(enc.out, batch.included.clone());
    let memory = fwd.linear(included, dec.embed);

    let mut vis_rows = Vec::new();
    let mut vis_slots = Vec::new();
    let mut mask_slots = Vec::new();
    for i in 0..n {
        let slot = model.slot(m, i);
        match batch.included.binary_search(&slot) {
            Ok(r) => {
                vis_rows.push(r);
                vis_slots.push(i);
            }
            Err(_) => mask_slots.push(i),
        }
    }
    let mut parts = Vec::new();
    if !vis_rows.is_empty() {
        parts.push((fwd.g.gather_rows(memory, vis_rows), vis_slots));
    }
    if !mask_slots.is_empty() {
        let tok = fwd.p(dec.mask_token);
        parts.push((fwd.g.gather_rows(tok, vec![0; mask_slots.len()]), mask_slots));
    }
    let q0 = fwd.g.scatter_rows(n, dd, parts);
    let pos = fwd.p(dec.pos);
    let mut x = fwd.g.add(q0, pos);

    let c = &dec.cross;
    let qn = fwd.norm(x, c.norm_q);
    let kvn = fwd.norm(memory, c.norm_kv);
    let (q, k, v) = (fwd.linear(qn, c.attn.q), fwd.linear(kvn, c.attn.k), fwd.linear(kvn, c.attn.v));
    let att = fwd.g.attention(q, k, v, model.cfg.decoder_heads, None);
    let o = fwd.linear(att, c.attn.out);
    x = fwd.g.add(x, o);
    let n2 = fwd.norm(x, c.norm2);
    let f = fwd.mlp(n2, c.mlp);
    x = fwd.g.add(x, f);
    for b in &dec.blocks {
        x = fwd.block(x, b, model.cfg.decoder_heads, None).0;
    }
    let x = fwd.norm(x, dec.norm);
    fwd.linear(x, dec.head)
}

/// Mean of included encoder outputs per group: `(MRI, PET)`.
pub fn group_pool_vars(fwd: &mut Fwd<'_>, enc: &Encoded, batch: &TokenBatch) -> Result<(Var, Var)> {
    let mri: Vec<usize> = [Modality::T1, Modality::T2, Modality::Flair].into_iter().flat_map(|m| batch.included_of(m)).collect();
    let pet = batch.included_of(Modality::Pet);
    if mri.is_empty() || pet.is_empty() {
        return Err(Error::Pairing("group pooling needs included MRI and PET tokens".into()));
    }
    let mut mri = mri;
    mri.sort_unstable();
    Ok((fwd.g.mean_rows(enc.out, mri), fwd.g.mean_rows(enc.out, pet)))
}

/// Applies one cross-modal predictor to a pooled row.
pub fn predict(fwd: &mut Fwd<'_>, mlp: Mlp, z: Var) -> Var {
    fwd.mlp(z, mlp)
}

/// Task head output (a `1 x 1` logit or regression value) from the CLS row.
pub fn task_output(fwd: &mut Fwd<'_>, head: TaskHead, enc_out: Var) -> Var {
    let cls = fwd.g.gather_rows(enc_out, vec![0]);
    let n = fwd.norm(cls, head.norm);
    fwd.linear(n, head.linear)
}

/// Everything one student pass produces for the pretraining objectives.
pub struct PretrainForward {
    pub batch: TokenBatch,
    pub encoded: Encoded,
    /// Predictions for every modality in `decode`, `N x p^3` each.
    pub predictions: Vec<(Modality, Var)>,
    /// `(z_MRI, z_PET)` when both groups have included tokens.
    pub pooled: Option<(Var, Var)>,
}

pub fn forward_pretrain(fwd: &mut Fwd<'_>, model: &Model, sample: &SamplePatches, plan: &MaskPlan, decode: ModalitySet) -> Result<PretrainForward> {
    let batch = tokenize(fwd, model, sample, plan)?;
    let encoded = encode(fwd, model, &batch)?;
    let predictions = decode.iter().map(|m| (m, decode_modality(fwd, model, &encoded, &batch, m))).collect();
    let pooled = group_pool_vars(fwd, &encoded, &batch).ok();
    Ok(PretrainForward { batch, encoded, predictions, pooled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::base().validate().unwrap();
        let bad = ModelConfig { heads: 5, ..ModelConfig::desk() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn encoder_params_come_first() {
        let model = Model::new(&ModelConfig::desk(), &mut stream(&[1])).unwrap();
        let teacher = model.encoder_store();
        for (id, p) in teacher.iter() {
            assert!(p.name.starts_with("encoder."));
            assert_eq!(model.store.name(id), p.name);
        }
        assert!(model.store.iter().skip(model.n_encoder_params).all(|(_, p)| !p.name.starts_with("encoder.")));
    }

    #[test]
    fn layout_slots() {
        let model = Model::new(&ModelConfig::desk(), &mut stream(&[1])).unwrap();
        assert_eq!(model.seq_len(), 257);
        assert_eq!(model.slot(Modality::T1, 0), 1);
        assert_eq!(model.slot(Modality::Pet, 63), 256);
    }
}
