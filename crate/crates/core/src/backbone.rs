//! Minimal vision-transformer encoder with per-layer prefix-prompt hooks.
//!
//! The encoder is the standard pre-norm ViT: patch embedding with a class
//! token and learned positional embeddings, followed by blocks of multi-head
//! self-attention and a GELU MLP, with a final layer norm. Layers listed in a
//! [`PromptSchedule`] receive per-sample prompt pairs that are concatenated
//! to the attention keys and values only; prompt tokens are never emitted,
//! so the output sequence length always equals the input sequence length.
//!
//! Weights are randomly initialized and frozen by default; a frozen backbone
//! enters the autograd graph as constants, so no gradient is ever tracked
//! for it.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, VarId};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Image batch `[batch, height, width, channels]`.
pub type ImageBatch = Array4<f64>;

/// Geometry and freezing policy of the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Pixels per side (images are square).
    pub image_size: usize,
    /// Pixels per patch side; must divide `image_size`.
    pub patch_size: usize,
    /// Input channels.
    pub in_channels: usize,
    /// Token width `d`; must be divisible by `num_heads`.
    pub embed_dim: usize,
    /// Number of attention/MLP blocks.
    pub num_layers: usize,
    pub num_heads: usize,
    /// MLP hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: f64,
    /// When true (the default), backbone weights take no gradient.
    pub frozen: bool,
}

impl Default for BackboneConfig {
    /// Desk-scale default: 16x16 images, 4x4 patches, d=32, 4 layers, 4 heads.
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            in_channels: 1,
            embed_dim: 32,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
            frozen: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 {
            return Err(Error::Config(
                "image_size and patch_size must be positive".into(),
            ));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers < 1 {
            return Err(Error::Config("num_layers must be >= 1".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Sequence length after patch embedding: class token + patches.
    pub fn seq_len(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn mlp_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// Which layers receive prompts, and how many prompt tokens each gets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSchedule {
    /// Block indices receiving prompts; must lie in `[0, num_layers)`.
    pub layers: BTreeSet<usize>,
    /// Prompt tokens per prompted layer; 0 means no injection anywhere.
    pub prompt_length: usize,
}

impl PromptSchedule {
    pub fn new(layers: impl IntoIterator<Item = usize>, prompt_length: usize) -> Self {
        Self {
            layers: layers.into_iter().collect(),
            prompt_length,
        }
    }

    /// Schedule prompting the first `depth` blocks.
    pub fn first_layers(depth: usize, prompt_length: usize) -> Self {
        Self::new(0..depth, prompt_length)
    }

    pub fn empty() -> Self {
        Self::new(std::iter::empty(), 0)
    }

    /// True when no prompt tokens are injected anywhere.
    pub fn is_empty(&self) -> bool {
        self.prompt_length == 0 || self.layers.is_empty()
    }

    pub fn num_prompted_layers(&self) -> usize {
        if self.prompt_length == 0 {
            0
        } else {
            self.layers.len()
        }
    }

    pub fn validate(&self, cfg: &BackboneConfig) -> Result<()> {
        if let Some(&max) = self.layers.iter().max() {
            if max >= cfg.num_layers {
                return Err(Error::Config(format!(
                    "schedule layer {max} out of range for {} blocks",
                    cfg.num_layers
                )));
            }
        }
        Ok(())
    }
}

/// Per-layer transformer token states for a batch of inputs.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    /// `[batch, seq_len, embed_dim]`.
    pub tokens: Array3<f64>,
    /// Which block produced these states; 0 is the patch embedding output.
    pub layer_index: usize,
    pub includes_cls: bool,
}

impl TokenBatch {
    pub fn batch_size(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    /// Token matrix `[seq_len, embed_dim]` of one sample.
    pub fn sample(&self, i: usize) -> Array2<f64> {
        self.tokens.index_axis(Axis(0), i).to_owned()
    }

    pub fn assert_finite(&self) -> Result<()> {
        if self.tokens.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric("non-finite token states".into()))
        }
    }
}

/// How a token sequence is reduced to a single feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    /// The class-token state.
    Cls,
    /// Mean over all (non-prompt) tokens.
    Mean,
}

/// Per-sample prompt pair for one layer: key and value halves, each
/// `[batch, prompt_length, embed_dim]`.
#[derive(Debug, Clone)]
pub struct LayerPrompt {
    pub key: Array3<f64>,
    pub value: Array3<f64>,
}

/// Value-level prompts for a batch, keyed by layer index.
pub type PromptMap = BTreeMap<usize, LayerPrompt>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockParams {
    pub ln1_gamma: Array2<f64>,
    pub ln1_beta: Array2<f64>,
    pub w_qkv: Array2<f64>,
    pub b_qkv: Array2<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array2<f64>,
    pub ln2_gamma: Array2<f64>,
    pub ln2_beta: Array2<f64>,
    pub w_fc1: Array2<f64>,
    pub b_fc1: Array2<f64>,
    pub w_fc2: Array2<f64>,
    pub b_fc2: Array2<f64>,
}

/// Frozen (by default) ViT encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch_weight: Array2<f64>,
    pub patch_bias: Array2<f64>,
    pub cls_token: Array2<f64>,
    pub pos_embed: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub final_gamma: Array2<f64>,
    pub final_beta: Array2<f64>,
}

fn init_weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

impl Backbone {
    /// Random initialization. A pretrained checkpoint is a drop-in via
    /// [`crate::checkpoint`]; the mechanics under test do not depend on
    /// pretraining quality.
    pub fn new(cfg: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let pd = cfg.patch_dim();
        let mlp = cfg.mlp_dim();
        let w_scale = (6.0 / (pd + d) as f64).sqrt();
        let a_scale = (6.0 / (2 * d) as f64).sqrt();
        let m1_scale = (6.0 / (d + mlp) as f64).sqrt();

        let blocks = (0..cfg.num_layers)
            .map(|_| BlockParams {
                ln1_gamma: Array2::ones((1, d)),
                ln1_beta: Array2::zeros((1, d)),
                w_qkv: init_weight(rng, d, 3 * d, a_scale),
                b_qkv: Array2::zeros((1, 3 * d)),
                w_out: init_weight(rng, d, d, a_scale),
                b_out: Array2::zeros((1, d)),
                ln2_gamma: Array2::ones((1, d)),
                ln2_beta: Array2::zeros((1, d)),
                w_fc1: init_weight(rng, d, mlp, m1_scale),
                b_fc1: Array2::zeros((1, mlp)),
                w_fc2: init_weight(rng, mlp, d, m1_scale),
                b_fc2: Array2::zeros((1, d)),
            })
            .collect();

        Ok(Self {
            patch_weight: init_weight(rng, pd, d, w_scale),
            patch_bias: Array2::zeros((1, d)),
            cls_token: init_weight(rng, 1, d, 0.02),
            pos_embed: init_weight(rng, cfg.seq_len(), d, 0.02),
            blocks,
            final_gamma: Array2::ones((1, d)),
            final_beta: Array2::zeros((1, d)),
            cfg,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.cfg.frozen
    }

    /// All weight matrices in a stable order (used by the optimizer and by
    /// graph binding; the two orders must match).
    pub fn param_list(&self) -> Vec<&Array2<f64>> {
        let mut ps: Vec<&Array2<f64>> = vec![
            &self.patch_weight,
            &self.patch_bias,
            &self.cls_token,
            &self.pos_embed,
        ];
        for b in &self.blocks {
            ps.extend([
                &b.ln1_gamma,
                &b.ln1_beta,
                &b.w_qkv,
                &b.b_qkv,
                &b.w_out,
                &b.b_out,
                &b.ln2_gamma,
                &b.ln2_beta,
                &b.w_fc1,
                &b.b_fc1,
                &b.w_fc2,
                &b.b_fc2,
            ]);
        }
        ps.extend([&self.final_gamma, &self.final_beta]);
        ps
    }

    pub fn param_list_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut ps: Vec<&mut Array2<f64>> = vec![
            &mut self.patch_weight,
            &mut self.patch_bias,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            ps.extend([
                &mut b.ln1_gamma,
                &mut b.ln1_beta,
                &mut b.w_qkv,
                &mut b.b_qkv,
                &mut b.w_out,
                &mut b.b_out,
                &mut b.ln2_gamma,
                &mut b.ln2_beta,
                &mut b.w_fc1,
                &mut b.b_fc1,
                &mut b.w_fc2,
                &mut b.b_fc2,
            ]);
        }
        ps.extend([&mut self.final_gamma, &mut self.final_beta]);
        ps
    }

    fn check_images(&self, images: &ImageBatch) -> Result<()> {
        let shape = images.shape();
        let (h, w, c) = (shape[1], shape[2], shape[3]);
        if h != self.cfg.image_size || w != self.cfg.image_size {
            return Err(Error::Config(format!(
                "expected {0}x{0} images, got {h}x{w}",
                self.cfg.image_size
            )));
        }
        if c != self.cfg.in_channels {
            return Err(Error::Config(format!(
                "expected {} channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if !images.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite image values".into()));
        }
        Ok(())
    }

    /// Row-major flattened patches of one image: `[num_patches, patch_dim]`.
    fn extract_patches(&self, images: &ImageBatch, sample: usize) -> Array2<f64> {
        let p = self.cfg.patch_size;
        let side = self.cfg.patches_per_side();
        let c = self.cfg.in_channels;
        let mut out = Array2::zeros((side * side, p * p * c));
        for py in 0..side {
            for px in 0..side {
                let row = py * side + px;
                let mut col = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..c {
                            out[[row, col]] = images[[sample, py * p + dy, px * p + dx, ch]];
                            col += 1;
                        }
                    }
                }
            }
        }
        out
    }

    /// Tokenize a batch of images: flatten patches, project, prepend the
    /// class token, add positional embeddings.
    pub fn patch_embed(&self, images: &ImageBatch) -> Result<TokenBatch> {
        self.check_images(images)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let ids = self.embed_on_graph(&mut g, &bound, images);
        let batch = images.shape()[0];
        let mut tokens = Array3::zeros((batch, self.cfg.seq_len(), self.cfg.embed_dim));
        for (i, id) in ids.into_iter().enumerate() {
            tokens.index_axis_mut(Axis(0), i).assign(g.value(id));
        }
        Ok(TokenBatch {
            tokens,
            layer_index: 0,
            includes_cls: true,
        })
    }

    /// Run the encoder blocks over already-embedded tokens, injecting the
    /// given prompt pairs at scheduled layers. Output length equals input
    /// length for every schedule.
    pub fn encode(
        &self,
        x: &TokenBatch,
        prompts: &PromptMap,
        schedule: &PromptSchedule,
    ) -> Result<TokenBatch> {
        Ok(self
            .encode_collect(x, prompts, schedule)?
            .pop()
            .expect("layers >= 1"))
    }

    /// As [`Backbone::encode`] but returning every block's output,
    /// `result[l]` being the state after block `l` (the last entry carries
    /// the final layer norm).
    pub fn encode_collect(
        &self,
        x: &TokenBatch,
        prompts: &PromptMap,
        schedule: &PromptSchedule,
    ) -> Result<Vec<TokenBatch>> {
        x.assert_finite()?;
        self.check_prompts(x.batch_size(), prompts, schedule)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let batch = x.batch_size();
        let seq = x.seq_len();
        let d = x.embed_dim();

        let mut per_layer: Vec<Array3<f64>> =
            vec![Array3::zeros((batch, seq, d)); self.cfg.num_layers];
        for i in 0..batch {
            let tokens = g.constant(x.sample(i));
            let prompt_vars = insert_prompt_constants(&mut g, prompts, i);
            let states = self.blocks_on_graph(&mut g, &bound, tokens, &prompt_vars, schedule);
            for (l, id) in states.into_iter().enumerate() {
                per_layer[l].index_axis_mut(Axis(0), i).assign(g.value(id));
            }
        }
        Ok(per_layer
            .into_iter()
            .enumerate()
            .map(|(l, tokens)| TokenBatch {
                tokens,
                layer_index: l + 1,
                includes_cls: x.includes_cls,
            })
            .collect())
    }

    /// Full forward from images: patch embedding then prompted encoding.
    pub fn forward(
        &self,
        images: &ImageBatch,
        prompts: &PromptMap,
        schedule: &PromptSchedule,
    ) -> Result<TokenBatch> {
        let embedded = self.patch_embed(images)?;
        self.encode(&embedded, prompts, schedule)
    }

    fn check_prompts(
        &self,
        batch: usize,
        prompts: &PromptMap,
        schedule: &PromptSchedule,
    ) -> Result<()> {
        schedule.validate(&self.cfg)?;
        if schedule.is_empty() {
            return Ok(());
        }
        for &layer in &schedule.layers {
            let lp = prompts.get(&layer).ok_or_else(|| {
                Error::Config(format!("schedule expects prompts for layer {layer}"))
            })?;
            for (name, t) in [("key", &lp.key), ("value", &lp.value)] {
                let shape = t.shape();
                if shape != [batch, schedule.prompt_length, self.cfg.embed_dim] {
                    return Err(Error::Config(format!(
                        "layer {layer} {name} prompt shape {:?}, expected [{batch}, {}, {}]",
                        shape, schedule.prompt_length, self.cfg.embed_dim
                    )));
                }
                if !t.iter().all(|v| v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite {name} prompt at layer {layer}"
                    )));
                }
            }
        }
        Ok(())
    }

    // ---- graph construction ----

    /// Insert all backbone weights into `g`. With `trainable` (only honored
    /// when the config is not frozen) they become gradient leaves, in
    /// `param_list` order; otherwise constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundBackbone {
        let train = trainable && !self.cfg.frozen;
        let ids: Vec<VarId> = self
            .param_list()
            .into_iter()
            .map(|p| {
                if train {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        BoundBackbone {
            ids,
            trainable: train,
        }
    }

    /// Patch-embed each sample of `images` on the graph; one `[seq, d]`
    /// variable per sample.
    pub fn embed_on_graph(
        &self,
        g: &mut Graph,
        bound: &BoundBackbone,
        images: &ImageBatch,
    ) -> Vec<VarId> {
        let batch = images.shape()[0];
        let [w_patch, b_patch, cls, pos] =
            [bound.ids[0], bound.ids[1], bound.ids[2], bound.ids[3]];
        (0..batch)
            .map(|i| {
                let patches = g.constant(self.extract_patches(images, i));
                let proj = g.matmul(patches, w_patch);
                let proj = g.add_row_broadcast(proj, b_patch);
                let with_cls = g.concat_rows(cls, proj);
                g.add(with_cls, pos)
            })
            .collect()
    }

    /// Run the blocks over one sample's tokens, returning each block's
    /// output state. `prompt_vars[layer]` supplies this sample's `(P_k, P_v)`;
    /// pass an empty map (or an empty schedule) for the vanilla forward.
    pub fn blocks_on_graph(
        &self,
        g: &mut Graph,
        bound: &BoundBackbone,
        tokens: VarId,
        prompt_vars: &BTreeMap<usize, (VarId, VarId)>,
        schedule: &PromptSchedule,
    ) -> Vec<VarId> {
        let mut x = tokens;
        let mut states = Vec::with_capacity(self.cfg.num_layers);
        for l in 0..self.cfg.num_layers {
            let p = bound.block_ids(l);
            let prompt = if !schedule.is_empty() && schedule.layers.contains(&l) {
                prompt_vars.get(&l).copied()
            } else {
                None
            };
            x = self.block_on_graph(g, x, &p, prompt);
            states.push(x);
        }
        let fin = g.layer_norm(x, bound.final_gamma(), bound.final_beta(), LAYER_NORM_EPS);
        // The final layer norm replaces the last block's raw state.
        *states.last_mut().expect("num_layers >= 1") = fin;
        states
    }

    fn block_on_graph(
        &self,
        g: &mut Graph,
        x: VarId,
        p: &BlockIds,
        prompt: Option<(VarId, VarId)>,
    ) -> VarId {
        let d = self.cfg.embed_dim;
        let heads = self.cfg.num_heads;
        let hd = self.cfg.head_dim();

        let ln = g.layer_norm(x, p.ln1_gamma, p.ln1_beta, LAYER_NORM_EPS);
        let qkv = g.matmul(ln, p.w_qkv);
        let qkv = g.add_row_broadcast(qkv, p.b_qkv);
        let q = g.slice_cols(qkv, 0, d);
        let k = g.slice_cols(qkv, d, 2 * d);
        let v = g.slice_cols(qkv, 2 * d, 3 * d);

        // Per-head attention; the prompt pair is split across head channels
        // so each head sees prompt_length extra key/value rows.
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (c0, c1) = (h * hd, (h + 1) * hd);
            let qh = g.slice_cols(q, c0, c1);
            let mut kh = g.slice_cols(k, c0, c1);
            let mut vh = g.slice_cols(v, c0, c1);
            if let Some((pk, pv)) = prompt {
                let pkh = g.slice_cols(pk, c0, c1);
                let pvh = g.slice_cols(pv, c0, c1);
                kh = g.concat_rows(kh, pkh);
                vh = g.concat_rows(vh, pvh);
            }
            head_outs.push(attention_on_graph(g, qh, kh, vh));
        }
        let mut ctx = head_outs[0];
        for &ho in &head_outs[1..] {
            ctx = g.concat_cols(ctx, ho);
        }
        let proj = g.matmul(ctx, p.w_out);
        let proj = g.add_row_broadcast(proj, p.b_out);
        let x = g.add(x, proj);

        let ln2 = g.layer_norm(x, p.ln2_gamma, p.ln2_beta, LAYER_NORM_EPS);
        let h1 = g.matmul(ln2, p.w_fc1);
        let h1 = g.add_row_broadcast(h1, p.b_fc1);
        let act = g.gelu(h1);
        let h2 = g.matmul(act, p.w_fc2);
        let h2 = g.add_row_broadcast(h2, p.b_fc2);
        g.add(x, h2)
    }
}

/// VarIds of a backbone bound onto a graph.
pub struct BoundBackbone {
    ids: Vec<VarId>,
    trainable: bool,
}

struct BlockIds {
    ln1_gamma: VarId,
    ln1_beta: VarId,
    w_qkv: VarId,
    b_qkv: VarId,
    w_out: VarId,
    b_out: VarId,
    ln2_gamma: VarId,
    ln2_beta: VarId,
    w_fc1: VarId,
    b_fc1: VarId,
    w_fc2: VarId,
    b_fc2: VarId,
}

impl BoundBackbone {
    const BLOCK_STRIDE: usize = 12;
    const HEADER: usize = 4; // patch_weight, patch_bias, cls, pos

    fn block_ids(&self, layer: usize) -> BlockIds {
        let o = Self::HEADER + layer * Self::BLOCK_STRIDE;
        BlockIds {
            ln1_gamma: self.ids[o],
            ln1_beta: self.ids[o + 1],
            w_qkv: self.ids[o + 2],
            b_qkv: self.ids[o + 3],
            w_out: self.ids[o + 4],
            b_out: self.ids[o + 5],
            ln2_gamma: self.ids[o + 6],
            ln2_beta: self.ids[o + 7],
            w_fc1: self.ids[o + 8],
            b_fc1: self.ids[o + 9],
            w_fc2: self.ids[o + 10],
            b_fc2: self.ids[o + 11],
        }
    }

    fn final_gamma(&self) -> VarId {
        self.ids[self.ids.len() - 2]
    }

    fn final_beta(&self) -> VarId {
        self.ids[self.ids.len() - 1]
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Parameter leaves in `param_list` order (for optimizer updates).
    pub fn param_ids(&self) -> &[VarId] {
        &self.ids
    }
}

/// Insert per-sample `(P_k, P_v)` constants for sample `i` of each layer.
pub fn insert_prompt_constants(
    g: &mut Graph,
    prompts: &PromptMap,
    sample: usize,
) -> BTreeMap<usize, (VarId, VarId)> {
    prompts
        .iter()
        .map(|(&layer, lp)| {
            let pk = g.constant(lp.key.index_axis(Axis(0), sample).to_owned());
            let pv = g.constant(lp.value.index_axis(Axis(0), sample).to_owned());
            (layer, (pk, pv))
        })
        .collect()
}

/// Scaled dot-product attention on the graph: `softmax(Q K^T / sqrt(d_k)) V`
/// with `d_k` the key width. K and V may carry prefix rows beyond Q's length.
pub fn attention_on_graph(g: &mut Graph, q: VarId, k: VarId, v: VarId) -> VarId {
    let d_k = g.value(k).ncols();
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scaled = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = g.softmax_rows(scaled);
    g.matmul(weights, v)
}

fn check_qkv(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Result<()> {
    for (name, m) in [("Q", q), ("K", k), ("V", v)] {
        if !m.iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite entries in {name}")));
        }
    }
    if q.ncols() != k.ncols() {
        return Err(Error::Shape(format!(
            "Q width {} vs K width {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::Shape(format!(
            "K length {} vs V length {}",
            k.nrows(),
            v.nrows()
        )));
    }
    if k.ncols() == 0 {
        return Err(Error::Shape("zero-width keys".into()));
    }
    Ok(())
}

/// Scaled dot-product attention over plain matrices.
pub fn attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(attention_with_weights(q, k, v)?.0)
}

/// Attention that also returns the softmax weight matrix (row-stochastic).
pub fn attention_with_weights(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_qkv(q, k, v)?;
    let d_k = k.ncols() as f64;
    let scores = q.dot(&k.t()) / d_k.sqrt();
    let weights = crate::autograd::softmax_rows(&scores);
    let out = weights.dot(v);
    Ok((out, weights))
}

/// Reduce token states to one feature vector per sample: `[batch, d]`.
pub fn pooled_feature(x: &TokenBatch, mode: PoolMode) -> Result<Array2<f64>> {
    x.assert_finite()?;
    let (batch, d) = (x.batch_size(), x.embed_dim());
    let mut out = Array2::zeros((batch, d));
    for i in 0..batch {
        let sample = x.tokens.index_axis(Axis(0), i);
        match mode {
            PoolMode::Cls => out.row_mut(i).assign(&sample.row(0)),
            PoolMode::Mean => {
                let mean = sample.mean_axis(Axis(0)).expect("non-empty sequence");
                out.row_mut(i).assign(&mean);
            }
        }
    }
    Ok(out)
}

/// Pool one sample's token variable on the graph.
pub fn pooled_feature_on_graph(g: &mut Graph, tokens: VarId, mode: PoolMode) -> VarId {
    match mode {
        PoolMode::Cls => g.slice_rows(tokens, 0, 1),
        PoolMode::Mean => g.mean_rows(tokens),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            image_size: 8,
            patch_size: 4,
            in_channels: 1,
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            frozen: true,
        }
    }

    fn random_images(cfg: &BackboneConfig, batch: usize, seed: u64) -> ImageBatch {
        let mut r = rng(seed);
        Array4::from_shape_fn(
            (batch, cfg.image_size, cfg.image_size, cfg.in_channels),
            |_| r.gen_range(-1.0..1.0),
        )
    }

    #[test]
    fn patch_embed_shapes() {
        // 8x8 image, patch 4, d=16 -> [1, 5, 16]; 4 patches + CLS.
        let cfg = tiny_cfg();
        let bb = Backbone::new(cfg.clone(), &mut rng(0)).unwrap();
        let images = random_images(&cfg, 1, 1);
        let t = bb.patch_embed(&images).unwrap();
        assert_eq!(t.tokens.shape(), &[1, 5, 16]);
        assert!(t.includes_cls);

        // 16x16 images, patch 4, d=32 -> [2, 17, 32].
        let cfg = BackboneConfig::default();
        let bb = Backbone::new(cfg.clone(), &mut rng(0)).unwrap();
        let images = random_images(&cfg, 2, 2);
        let t = bb.patch_embed(&images).unwrap();
        assert_eq!(t.tokens.shape(), &[2, 17, 32]);
    }

    #[test]
    fn patch_divisibility_rejected() {
        let cfg = BackboneConfig {
            image_size: 8,
            patch_size: 5,
            ..tiny_cfg()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(Backbone::new(cfg, &mut rng(0)).is_err());
    }

    #[test]
    fn singleton_attention_returns_value() {
        let q = array![[1.0, 0.0]];
        let out = attention(&q, &q, &q).unwrap();
        assert_eq!(out, q);
    }

    #[test]
    fn attention_hand_computed_two_keys() {
        // softmax([1/sqrt(2), 0]) recomputed here from exp directly.
        let q = array![[1.0, 0.0]];
        let k = array![[1.0, 0.0], [0.0, 1.0]];
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        let (out, weights) = attention_with_weights(&q, &k, &v).unwrap();
        let e = (1.0_f64 / 2.0_f64.sqrt()).exp();
        let w0 = e / (e + 1.0);
        assert!((weights[[0, 0]] - w0).abs() < 1e-12);
        assert!((w0 - 0.6698).abs() < 1e-4);
        assert!((out[[0, 0]] - w0).abs() < 1e-12);
        assert!((out[[0, 1]] - (1.0 - w0)).abs() < 1e-12);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let q = array![[0.3, -0.7]];
        let k = array![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]];
        let v = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let (out, weights) = attention_with_weights(&q, &k, &v).unwrap();
        for c in 0..3 {
            assert!((weights[[0, c]] - 1.0 / 3.0).abs() < 1e-12);
        }
        let mean = v.mean_axis(Axis(0)).unwrap();
        assert!((out[[0, 0]] - mean[0]).abs() < 1e-12);
        assert!((out[[0, 1]] - mean[1]).abs() < 1e-12);
    }

    #[test]
    fn attention_rejects_non_finite() {
        let q = array![[f64::NAN, 0.0]];
        let k = array![[1.0, 0.0]];
        assert!(matches!(attention(&q, &k, &k), Err(Error::Numeric(_))));
    }

    #[test]
    fn empty_schedule_matches_vanilla_encode() {
        let cfg = tiny_cfg();
        let bb = Backbone::new(cfg.clone(), &mut rng(3)).unwrap();
        let images = random_images(&cfg, 2, 4);
        let x = bb.patch_embed(&images).unwrap();
        let vanilla = bb
            .encode(&x, &PromptMap::new(), &PromptSchedule::empty())
            .unwrap();
        // Zero-length prompts on every layer must match within 1e-6.
        let schedule = PromptSchedule::first_layers(cfg.num_layers, 0);
        let empty = bb.encode(&x, &PromptMap::new(), &schedule).unwrap();
        let max_diff = (&vanilla.tokens - &empty.tokens)
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(max_diff <= 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn prompted_encode_preserves_seq_len() {
        let cfg = tiny_cfg();
        let bb = Backbone::new(cfg.clone(), &mut rng(5)).unwrap();
        let images = random_images(&cfg, 3, 6);
        let x = bb.patch_embed(&images).unwrap();
        let schedule = PromptSchedule::first_layers(1, 2);
        let mut prompts = PromptMap::new();
        let mut r = rng(7);
        prompts.insert(
            0,
            LayerPrompt {
                key: Array3::from_shape_fn((3, 2, 16), |_| r.gen_range(-1.0..1.0)),
                value: Array3::from_shape_fn((3, 2, 16), |_| r.gen_range(-1.0..1.0)),
            },
        );
        let out = bb.encode(&x, &prompts, &schedule).unwrap();
        assert_eq!(out.seq_len(), x.seq_len());
        assert_eq!(out.batch_size(), 3);
    }

    #[test]
    fn prompts_on_later_layer_leave_earlier_states_unchanged() {
        let cfg = tiny_cfg();
        let bb = Backbone::new(cfg.clone(), &mut rng(8)).unwrap();
        let images = random_images(&cfg, 2, 9);
        let x = bb.patch_embed(&images).unwrap();

        let schedule = PromptSchedule::new([1], 2);
        let mut prompts = PromptMap::new();
        let mut r = rng(10);
        prompts.insert(
            1,
            LayerPrompt {
                key: Array3::from_shape_fn((2, 2, 16), |_| r.gen_range(-1.0..1.0)),
                value: Array3::from_shape_fn((2, 2, 16), |_| r.gen_range(-1.0..1.0)),
            },
        );
        let with = bb.encode_collect(&x, &prompts, &schedule).unwrap();
        let without = bb
            .encode_collect(&x, &PromptMap::new(), &PromptSchedule::empty())
            .unwrap();
        // Layer 0 states identical; final states differ.
        let diff0 = (&with[0].tokens - &without[0].tokens)
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        assert_eq!(diff0, 0.0);
        let diff_last = (&with[1].tokens - &without[1].tokens)
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(diff_last > 1e-9);
    }

    #[test]
    fn prompt_length_mismatch_rejected() {
        let cfg = tiny_cfg();
        let bb = Backbone::new(cfg.clone(), &mut rng(11)).unwrap();
        let images = random_images(&cfg, 1, 12);
        let x = bb.patch_embed(&images).unwrap();
        let schedule = PromptSchedule::new([0], 4);
        let mut prompts = PromptMap::new();
        prompts.insert(
            0,
            LayerPrompt {
                key: Array3::zeros((1, 2, 16)), // wrong length: 2 != 4
                value: Array3::zeros((1, 2, 16)),
            },
        );
        assert!(matches!(
            bb.encode(&x, &prompts, &schedule),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pooled_feature_modes() {
        let tokens = Array3::from_shape_vec((1, 2, 2), vec![1.0, 1.0, 3.0, 3.0]).unwrap();
        let tb = TokenBatch {
            tokens,
            layer_index: 1,
            includes_cls: true,
        };
        let mean = pooled_feature(&tb, PoolMode::Mean).unwrap();
        assert_eq!(mean, array![[2.0, 2.0]]);
        let cls = pooled_feature(&tb, PoolMode::Cls).unwrap();
        assert_eq!(cls, array![[1.0, 1.0]]);

        // Single token: both modes return the token itself.
        let single = TokenBatch {
            tokens: Array3::from_shape_vec((1, 1, 2), vec![0.5, -0.5]).unwrap(),
            layer_index: 1,
            includes_cls: true,
        };
        assert_eq!(
            pooled_feature(&single, PoolMode::Cls).unwrap(),
            pooled_feature(&single, PoolMode::Mean).unwrap()
        );
    }

    #[test]
    fn frozen_backbone_takes_no_gradient_but_affects_loss() {
        let cfg = tiny_cfg();
        let mut bb = Backbone::new(cfg.clone(), &mut rng(13)).unwrap();
        let images = random_images(&cfg, 1, 14);

        let loss_of = |bb: &Backbone| -> f64 {
            let mut g = Graph::new();
            let bound = bb.bind(&mut g, true); // trainable request ignored: frozen
            let emb = bb.embed_on_graph(&mut g, &bound, &images);
            let states = bb.blocks_on_graph(
                &mut g,
                &bound,
                emb[0],
                &BTreeMap::new(),
                &PromptSchedule::empty(),
            );
            let pooled = pooled_feature_on_graph(&mut g, *states.last().unwrap(), PoolMode::Cls);
            let sq = g.mul(pooled, pooled);
            let s = g.sum_all(sq);
            g.scalar_value(s)
        };

        // Gradient absent for every frozen weight.
        let mut g = Graph::new();
        let bound = bb.bind(&mut g, true);
        assert!(!bound.is_trainable());
        let emb = bb.embed_on_graph(&mut g, &bound, &images);
        let states = bb.blocks_on_graph(
            &mut g,
            &bound,
            emb[0],
            &BTreeMap::new(),
            &PromptSchedule::empty(),
        );
        let pooled = pooled_feature_on_graph(&mut g, *states.last().unwrap(), PoolMode::Cls);
        let sq = g.mul(pooled, pooled);
        let s = g.sum_all(sq);
        g.backward(s);
        for &id in bound.param_ids() {
            assert!(g.grad(id).is_none());
        }

        // Yet perturbing a weight changes the loss.
        let base = loss_of(&bb);
        bb.blocks[0].w_qkv[[0, 0]] += 0.5;
        let bumped = loss_of(&bb);
        assert!((base - bumped).abs() > 1e-9, "{base} vs {bumped}");
    }
}
