//! Per-task prompt generators and the prefix-attention combination rule.
//!
//! A [`TaskPrompter`] is a two-layer feedforward map from a sample's pooled
//! prompt-free feature to a full prompt tensor, split per layer into a key
//! half and a value half. Prompts are therefore per-sample (adaptive), not
//! per-task constants. The key/value halves are concatenated into the
//! attention keys and values of the scheduled backbone layers; queries are
//! untouched, so attention output length never changes.

use ndarray::{Array2, Array4, Array5, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, VarId};
use crate::backbone::{self, LayerPrompt, PromptMap, PromptSchedule, TokenBatch};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => crate::autograd::gelu(x),
        }
    }
}

/// Generated prompt tensor: `[batch, num_prompted_layers, 2, prompt_length,
/// embed_dim]`, the third axis indexing (key half, value half).
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub data: Array5<f64>,
}

impl Prompt {
    pub fn batch_size(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn num_layers(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn prompt_length(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn embed_dim(&self) -> usize {
        self.data.shape()[4]
    }

    /// Split along the key/value axis. Concatenating the halves back
    /// reproduces the tensor exactly.
    pub fn divide(&self) -> (Array4<f64>, Array4<f64>) {
        let p_k = self.data.index_axis(Axis(2), 0).to_owned();
        let p_v = self.data.index_axis(Axis(2), 1).to_owned();
        (p_k, p_v)
    }

    /// Inverse of [`Prompt::divide`].
    pub fn from_halves(p_k: &Array4<f64>, p_v: &Array4<f64>) -> Result<Self> {
        if p_k.dim() != p_v.dim() {
            return Err(Error::Shape(format!(
                "prompt halves differ: {:?} vs {:?}",
                p_k.dim(),
                p_v.dim()
            )));
        }
        let (b, l, t, d) = p_k.dim();
        let mut data = Array5::zeros((b, l, 2, t, d));
        data.index_axis_mut(Axis(2), 0).assign(p_k);
        data.index_axis_mut(Axis(2), 1).assign(p_v);
        Ok(Self { data })
    }

    /// Arrange the halves into the per-layer map consumed by
    /// [`crate::backbone::Backbone::encode`], pairing axis 1 with the
    /// schedule's layers in ascending order.
    pub fn to_prompt_map(&self, schedule: &PromptSchedule) -> Result<PromptMap> {
        if schedule.is_empty() {
            return Ok(PromptMap::new());
        }
        if self.num_layers() != schedule.num_prompted_layers()
            || self.prompt_length() != schedule.prompt_length
        {
            return Err(Error::Config(format!(
                "prompt tensor {:?} does not fit schedule ({} layers, length {})",
                self.data.shape(),
                schedule.num_prompted_layers(),
                schedule.prompt_length
            )));
        }
        let (p_k, p_v) = self.divide();
        let mut map = PromptMap::new();
        for (idx, &layer) in schedule.layers.iter().enumerate() {
            map.insert(
                layer,
                LayerPrompt {
                    key: p_k.index_axis(Axis(1), idx).to_owned(),
                    value: p_v.index_axis(Axis(1), idx).to_owned(),
                },
            );
        }
        Ok(map)
    }
}

/// Two-layer feedforward prompt generator for one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskPrompter {
    pub task_id: usize,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub activation: Activation,
    pub num_prompted_layers: usize,
    pub prompt_length: usize,
    pub embed_dim: usize,
}

impl TaskPrompter {
    /// `hidden_dim` defaults to `embed_dim` when `None`.
    pub fn new(
        task_id: usize,
        embed_dim: usize,
        hidden_dim: Option<usize>,
        schedule: &PromptSchedule,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden = hidden_dim.unwrap_or(embed_dim);
        let out_dim = schedule.num_prompted_layers() * 2 * schedule.prompt_length * embed_dim;
        let s1 = (6.0 / (embed_dim + hidden) as f64).sqrt();
        let s2 = (6.0 / (hidden + out_dim.max(1)) as f64).sqrt();
        Self {
            task_id,
            w1: Array2::from_shape_fn((embed_dim, hidden), |_| rng.gen_range(-s1..s1)),
            b1: Array2::zeros((1, hidden)),
            w2: Array2::from_shape_fn((hidden, out_dim), |_| rng.gen_range(-s2..s2)),
            b2: Array2::zeros((1, out_dim)),
            activation: Activation::Gelu,
            num_prompted_layers: schedule.num_prompted_layers(),
            prompt_length: schedule.prompt_length,
            embed_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.num_prompted_layers * 2 * self.prompt_length * self.embed_dim
    }

    pub fn param_list(&self) -> Vec<&Array2<f64>> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn param_list_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn check(&self) -> Result<()> {
        if self.w2.ncols() != self.out_dim() || self.b2.ncols() != self.out_dim() {
            return Err(Error::Config(format!(
                "prompter output width {} != layers*2*length*dim = {}",
                self.w2.ncols(),
                self.out_dim()
            )));
        }
        Ok(())
    }

    /// Forward the MLP for one pooled feature row `[1, d]`.
    fn mlp_row(&self, x: &Array2<f64>) -> Array2<f64> {
        let h = x.dot(&self.w1) + &self.b1.row(0);
        let h = h.mapv(|v| self.activation.apply(v));
        h.dot(&self.w2) + &self.b2.row(0)
    }

    /// Generate per-sample prompts from prompt-free backbone tokens.
    /// Deterministic for fixed weights.
    pub fn generate_prompt(&self, tokens: &TokenBatch) -> Result<Prompt> {
        self.check()?;
        if tokens.embed_dim() != self.w1.nrows() {
            return Err(Error::Config(format!(
                "token width {} does not match prompter input width {}",
                tokens.embed_dim(),
                self.w1.nrows()
            )));
        }
        let pooled = backbone::pooled_feature(tokens, backbone::PoolMode::Mean)?;
        let batch = tokens.batch_size();
        let (l, t, d) = (self.num_prompted_layers, self.prompt_length, self.embed_dim);
        let mut flat = Vec::with_capacity(batch * self.out_dim());
        for i in 0..batch {
            let x = pooled.row(i).to_owned().insert_axis(Axis(0));
            let row = self.mlp_row(&x);
            flat.extend(row.iter().copied());
        }
        let data = Array5::from_shape_vec((batch, l, 2, t, d), flat)
            .map_err(|e| Error::Shape(format!("prompt reshape: {e}")))?;
        Ok(Prompt { data })
    }

    /// Bind the MLP weights as gradient leaves, in `param_list` order.
    pub fn bind(&self, g: &mut Graph) -> BoundPrompter {
        BoundPrompter {
            w1: g.param(self.w1.clone()),
            b1: g.param(self.b1.clone()),
            w2: g.param(self.w2.clone()),
            b2: g.param(self.b2.clone()),
            activation: self.activation,
            num_prompted_layers: self.num_prompted_layers,
            prompt_length: self.prompt_length,
            embed_dim: self.embed_dim,
        }
    }

    /// Bind as constants (evaluation path).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundPrompter {
        BoundPrompter {
            w1: g.constant(self.w1.clone()),
            b1: g.constant(self.b1.clone()),
            w2: g.constant(self.w2.clone()),
            b2: g.constant(self.b2.clone()),
            activation: self.activation,
            num_prompted_layers: self.num_prompted_layers,
            prompt_length: self.prompt_length,
            embed_dim: self.embed_dim,
        }
    }
}

/// Prompter weights bound onto a graph.
pub struct BoundPrompter {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
    activation: Activation,
    num_prompted_layers: usize,
    prompt_length: usize,
    embed_dim: usize,
}

impl BoundPrompter {
    pub fn param_ids(&self) -> Vec<VarId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    /// Generate one sample's prompt pairs from its pooled feature `[1, d]`:
    /// one `(P_k, P_v)` pair (each `[prompt_length, embed_dim]`) per
    /// scheduled layer, in ascending layer order.
    pub fn generate_on_graph(&self, g: &mut Graph, pooled: VarId) -> Vec<(VarId, VarId)> {
        if self.num_prompted_layers == 0 || self.prompt_length == 0 {
            return Vec::new();
        }
        let h = g.matmul(pooled, self.w1);
        let h = g.add_row_broadcast(h, self.b1);
        let act = match self.activation {
            Activation::Relu => g.relu(h),
            Activation::Gelu => g.gelu(h),
        };
        let out = g.matmul(act, self.w2);
        let out = g.add_row_broadcast(out, self.b2);

        let (t, d) = (self.prompt_length, self.embed_dim);
        let block = t * d;
        (0..self.num_prompted_layers)
            .map(|l| {
                let k_start = (l * 2) * block;
                let v_start = (l * 2 + 1) * block;
                let k_flat = g.slice_cols(out, k_start, k_start + block);
                let v_flat = g.slice_cols(out, v_start, v_start + block);
                let p_k = g.reshape(k_flat, t, d);
                let p_v = g.reshape(v_flat, t, d);
                (p_k, p_v)
            })
            .collect()
    }
}

/// Prefix attention: `softmax(Q (K ++ P_k)^T / sqrt(d_k)) (V ++ P_v)` where
/// `++` concatenates along the sequence axis. Output length equals `|Q|`.
pub fn prompted_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    p_k: &Array2<f64>,
    p_v: &Array2<f64>,
) -> Result<Array2<f64>> {
    if p_k.nrows() != p_v.nrows() {
        return Err(Error::Shape(format!(
            "prompt halves differ in length: {} vs {}",
            p_k.nrows(),
            p_v.nrows()
        )));
    }
    if p_k.nrows() == 0 {
        return backbone::attention(q, k, v);
    }
    if p_k.ncols() != k.ncols() || p_v.ncols() != v.ncols() {
        return Err(Error::Shape(format!(
            "prompt width {}x{} does not match K/V width {}x{}",
            p_k.ncols(),
            p_v.ncols(),
            k.ncols(),
            v.ncols()
        )));
    }
    let k_ext = ndarray::concatenate![Axis(0), k.view(), p_k.view()];
    let v_ext = ndarray::concatenate![Axis(0), v.view(), p_v.view()];
    backbone::attention(q, &k_ext, &v_ext)
}

/// As [`prompted_attention`] but also returning the row-stochastic weights
/// over the extended key set.
pub fn prompted_attention_with_weights(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    p_k: &Array2<f64>,
    p_v: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if p_k.nrows() != p_v.nrows() {
        return Err(Error::Shape(format!(
            "prompt halves differ in length: {} vs {}",
            p_k.nrows(),
            p_v.nrows()
        )));
    }
    if p_k.nrows() == 0 {
        return backbone::attention_with_weights(q, k, v);
    }
    let k_ext = ndarray::concatenate![Axis(0), k.view(), p_k.view()];
    let v_ext = ndarray::concatenate![Axis(0), v.view(), p_v.view()];
    backbone::attention_with_weights(q, &k_ext, &v_ext)
}

/// Graph version of [`prompted_attention`].
pub fn prompted_attention_on_graph(
    g: &mut Graph,
    q: VarId,
    k: VarId,
    v: VarId,
    p_k: VarId,
    p_v: VarId,
) -> VarId {
    let k_ext = g.concat_rows(k, p_k);
    let v_ext = g.concat_rows(v, p_v);
    backbone::attention_on_graph(g, q, k_ext, v_ext)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{max_relative_error, numerical_grad};
    use ndarray::{array, Array3};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tokens(data: Array3<f64>) -> TokenBatch {
        TokenBatch {
            tokens: data,
            layer_index: 4,
            includes_cls: true,
        }
    }

    fn random_tokens(batch: usize, seq: usize, d: usize, seed: u64) -> TokenBatch {
        let mut r = rng(seed);
        tokens(Array3::from_shape_fn((batch, seq, d), |_| {
            r.gen_range(-1.0..1.0)
        }))
    }

    #[test]
    fn zero_weights_give_zero_prompt() {
        let schedule = PromptSchedule::first_layers(2, 3);
        let mut p = TaskPrompter::new(0, 4, None, &schedule, &mut rng(1));
        p.w1.fill(0.0);
        p.w2.fill(0.0);
        let t = random_tokens(2, 3, 4, 2);
        let prompt = p.generate_prompt(&t).unwrap();
        assert_eq!(prompt.data.shape(), &[2, 2, 2, 3, 4]);
        assert!(prompt.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn known_weights_match_hand_computation() {
        // 2-d input, relu, one prompted layer with one 2-d prompt token:
        // out_dim = 1*2*1*2 = 4.
        let schedule = PromptSchedule::first_layers(1, 1);
        let mut p = TaskPrompter::new(0, 2, Some(2), &schedule, &mut rng(3));
        p.activation = Activation::Relu;
        p.w1 = array![[1.0, 0.0], [0.0, 1.0]];
        p.b1 = array![[0.1, -2.0]];
        p.w2 = array![
            [1.0, 0.0, 0.5, 0.0],
            [0.0, 1.0, 0.0, -0.5]
        ];
        p.b2 = array![[0.0, 0.25, 0.0, 0.0]];

        // Single token [0.4, 0.8]: pooled = itself.
        // h = relu([0.4 + 0.1, 0.8 - 2.0]) = [0.5, 0.0]
        // out = [0.5, 0.25, 0.25, 0.0]
        let t = tokens(Array3::from_shape_vec((1, 1, 2), vec![0.4, 0.8]).unwrap());
        let prompt = p.generate_prompt(&t).unwrap();
        let (p_k, p_v) = prompt.divide();
        assert_eq!(p_k, Array4::from_shape_vec((1, 1, 1, 2), vec![0.5, 0.25]).unwrap());
        assert_eq!(p_v, Array4::from_shape_vec((1, 1, 1, 2), vec![0.25, 0.0]).unwrap());
    }

    #[test]
    fn generation_is_deterministic() {
        let schedule = PromptSchedule::first_layers(3, 2);
        let p = TaskPrompter::new(1, 6, None, &schedule, &mut rng(4));
        let t = random_tokens(3, 4, 6, 5);
        let a = p.generate_prompt(&t).unwrap();
        let b = p.generate_prompt(&t).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn divide_separates_halves_and_round_trips() {
        let mut data = Array5::zeros((1, 2, 2, 3, 4));
        data.index_axis_mut(Axis(2), 0).fill(1.0);
        data.index_axis_mut(Axis(2), 1).fill(2.0);
        let p = Prompt { data };
        let (p_k, p_v) = p.divide();
        assert!(p_k.iter().all(|v| *v == 1.0));
        assert!(p_v.iter().all(|v| *v == 2.0));
        let rebuilt = Prompt::from_halves(&p_k, &p_v).unwrap();
        assert_eq!(rebuilt.data, p.data);
    }

    #[test]
    fn divide_matches_index_slicing_oracle_on_random_tensor() {
        let mut r = rng(6);
        let data = Array5::from_shape_fn((2, 3, 2, 4, 5), |_| r.gen_range(-1.0..1.0));
        let p = Prompt { data: data.clone() };
        let (p_k, p_v) = p.divide();
        for b in 0..2 {
            for l in 0..3 {
                for t in 0..4 {
                    for c in 0..5 {
                        assert_eq!(p_k[[b, l, t, c]], data[[b, l, 0, t, c]]);
                        assert_eq!(p_v[[b, l, t, c]], data[[b, l, 1, t, c]]);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_prompt_equals_plain_attention() {
        let mut r = rng(7);
        let q = Array2::from_shape_fn((3, 4), |_| r.gen_range(-1.0..1.0));
        let k = Array2::from_shape_fn((5, 4), |_| r.gen_range(-1.0..1.0));
        let v = Array2::from_shape_fn((5, 4), |_| r.gen_range(-1.0..1.0));
        let empty = Array2::zeros((0, 4));
        let plain = backbone::attention(&q, &k, &v).unwrap();
        let prompted = prompted_attention(&q, &k, &v, &empty, &empty).unwrap();
        let diff = (&plain - &prompted)
            .iter()
            .fold(0.0_f64, |m, x| m.max(x.abs()));
        assert!(diff <= 1e-6);
    }

    #[test]
    fn equal_logit_prompt_splits_weight() {
        let q = array![[1.0, 0.0]];
        let k = array![[1.0, 0.0]];
        let v = array![[1.0, 0.0]];
        let p_k = array![[1.0, 0.0]];
        let p_v = array![[0.0, 1.0]];
        let (out, weights) = prompted_attention_with_weights(&q, &k, &v, &p_k, &p_v).unwrap();
        assert!((weights[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((weights[[0, 1]] - 0.5).abs() < 1e-12);
        assert!((out[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((out[[0, 1]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn strongly_repelled_prompt_is_masked_out() {
        let mut r = rng(8);
        let q = Array2::from_shape_fn((2, 3), |_| r.gen_range(-1.0..1.0));
        let k = Array2::from_shape_fn((4, 3), |_| r.gen_range(-1.0..1.0));
        let v = Array2::from_shape_fn((4, 3), |_| r.gen_range(-1.0..1.0));
        // Prompt keys anti-aligned with every query direction.
        let p_k = &q.sum_axis(Axis(0)).insert_axis(Axis(0)) * -1e6;
        let p_v = Array2::from_elem((1, 3), 42.0);
        let plain = backbone::attention(&q, &k, &v).unwrap();
        let prompted = prompted_attention(&q, &k, &v, &p_k, &p_v).unwrap();
        let diff = (&plain - &prompted)
            .iter()
            .fold(0.0_f64, |m, x| m.max(x.abs()));
        assert!(diff <= 1e-4, "diff {diff}");
    }

    #[test]
    fn mismatched_prompt_halves_rejected() {
        let q = array![[1.0, 0.0]];
        let p_k = Array2::zeros((2, 2));
        let p_v = Array2::zeros((3, 2));
        assert!(matches!(
            prompted_attention(&q, &q, &q, &p_k, &p_v),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn row_normalization_holds_with_prompts() {
        let mut r = rng(9);
        let q = Array2::from_shape_fn((3, 4), |_| r.gen_range(-2.0..2.0));
        let k = Array2::from_shape_fn((5, 4), |_| r.gen_range(-2.0..2.0));
        let v = Array2::from_shape_fn((5, 4), |_| r.gen_range(-2.0..2.0));
        let p_k = Array2::from_shape_fn((2, 4), |_| r.gen_range(-2.0..2.0));
        let p_v = Array2::from_shape_fn((2, 4), |_| r.gen_range(-2.0..2.0));
        let (_, weights) = prompted_attention_with_weights(&q, &k, &v, &p_k, &p_v).unwrap();
        assert_eq!(weights.ncols(), 7);
        for row in weights.rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn graph_generation_matches_eager() {
        let schedule = PromptSchedule::first_layers(2, 3);
        let p = TaskPrompter::new(0, 4, None, &schedule, &mut rng(10));
        let t = random_tokens(2, 3, 4, 11);
        let eager = p.generate_prompt(&t).unwrap();
        let map = eager.to_prompt_map(&schedule).unwrap();

        let pooled = backbone::pooled_feature(&t, backbone::PoolMode::Mean).unwrap();
        for i in 0..2 {
            let mut g = Graph::new();
            let bound = p.bind_frozen(&mut g);
            let x = g.constant(pooled.row(i).to_owned().insert_axis(Axis(0)));
            let pairs = bound.generate_on_graph(&mut g, x);
            for (idx, &layer) in schedule.layers.iter().enumerate() {
                let lp = &map[&layer];
                let (pk, pv) = pairs[idx];
                let k_expect = lp.key.index_axis(Axis(0), i);
                let v_expect = lp.value.index_axis(Axis(0), i);
                assert_eq!(g.value(pk), &k_expect.to_owned());
                assert_eq!(g.value(pv), &v_expect.to_owned());
            }
        }
    }

    #[test]
    fn prompted_attention_gradients_match_finite_differences() {
        let mut r = rng(12);
        let params: Vec<Array2<f64>> = vec![
            Array2::from_shape_fn((3, 4), |_| r.gen_range(-1.0..1.0)), // q
            Array2::from_shape_fn((3, 4), |_| r.gen_range(-1.0..1.0)), // k
            Array2::from_shape_fn((3, 4), |_| r.gen_range(-1.0..1.0)), // v
            Array2::from_shape_fn((2, 4), |_| r.gen_range(-1.0..1.0)), // p_k
            Array2::from_shape_fn((2, 4), |_| r.gen_range(-1.0..1.0)), // p_v
        ];
        let build = |g: &mut Graph, ids: &[VarId]| {
            let out = prompted_attention_on_graph(g, ids[0], ids[1], ids[2], ids[3], ids[4]);
            let sq = g.mul(out, out);
            g.sum_all(sq)
        };
        let f = |p: &[Array2<f64>]| {
            let mut g = Graph::new();
            let ids: Vec<VarId> = p.iter().map(|a| g.constant(a.clone())).collect();
            let s = build(&mut g, &ids);
            g.scalar_value(s)
        };
        let mut g = Graph::new();
        let ids: Vec<VarId> = params.iter().map(|a| g.param(a.clone())).collect();
        let s = build(&mut g, &ids);
        g.backward(s);
        for i in 0..params.len() {
            let num = numerical_grad(&params, i, 1e-5, f);
            let err = max_relative_error(g.grad(ids[i]).unwrap(), &num);
            assert!(err <= 1e-4, "input {i}: rel err {err}");
        }
    }

    #[test]
    fn prompter_weight_gradients_match_finite_differences() {
        let schedule = PromptSchedule::first_layers(1, 2);
        let prompter = TaskPrompter::new(0, 3, Some(3), &schedule, &mut rng(13));
        let pooled = {
            let mut r = rng(14);
            Array2::from_shape_fn((1, 3), |_| r.gen_range(-1.0..1.0))
        };

        let eval = |params: &[Array2<f64>]| -> f64 {
            let p = TaskPrompter {
                w1: params[0].clone(),
                b1: params[1].clone(),
                w2: params[2].clone(),
                b2: params[3].clone(),
                ..prompter.clone()
            };
            let row = p.mlp_row(&pooled);
            row.iter().map(|v| v * v).sum()
        };

        let mut g = Graph::new();
        let bound = prompter.bind(&mut g);
        let x = g.constant(pooled.clone());
        let pairs = bound.generate_on_graph(&mut g, x);
        // Loss = sum of squares over both halves, matching `eval`.
        let mut terms = Vec::new();
        for (pk, pv) in pairs {
            let k2 = g.mul(pk, pk);
            terms.push(g.sum_all(k2));
            let v2 = g.mul(pv, pv);
            terms.push(g.sum_all(v2));
        }
        let loss = g.add_n(&terms);
        g.backward(loss);

        let params: Vec<Array2<f64>> = prompter.param_list().into_iter().cloned().collect();
        for (i, id) in bound.param_ids().into_iter().enumerate() {
            let num = numerical_grad(&params, i, 1e-5, eval);
            let err = max_relative_error(g.grad(id).unwrap(), &num);
            assert!(err <= 1e-4, "param {i}: rel err {err}");
        }
    }
}
