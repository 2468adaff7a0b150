//! Per-task key-learners: a learnable self-attention transform over backbone
//! tokens that yields one key vector per input, trained with a triplet loss
//! against the hardest competing task plus an L1 penalty, and matched against
//! pooled features at inference to recover the task identity.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, VarId};
use crate::backbone::{self, PoolMode, TokenBatch};
use crate::error::{Error, Result};

/// Margin and regularization weight of the key objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyLossConfig {
    /// Triplet margin (alpha).
    pub margin: f64,
    /// Weight of the L1 term.
    pub lambda_reg: f64,
}

impl Default for KeyLossConfig {
    fn default() -> Self {
        Self {
            margin: 0.5,
            lambda_reg: 0.01,
        }
    }
}

impl KeyLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::Config(format!(
                "margin must be finite and nonnegative, got {}",
                self.margin
            )));
        }
        if !(self.lambda_reg.is_finite() && self.lambda_reg >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_reg must be finite and nonnegative, got {}",
                self.lambda_reg
            )));
        }
        Ok(())
    }
}

/// Similarity used for negative mining and task matching. Cosine is the
/// default: key selection across differently-scaled learners needs scale
/// robustness even though the triplet loss itself is Euclidean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Cosine,
    /// Negative squared Euclidean distance.
    Euclidean,
}

impl Similarity {
    pub fn score(&self, a: &Array1<f64>, b: &Array1<f64>) -> f64 {
        match self {
            Similarity::Cosine => {
                let dot = a.dot(b);
                let na = a.dot(a).sqrt();
                let nb = b.dot(b).sqrt();
                if na < 1e-300 || nb < 1e-300 {
                    0.0
                } else {
                    dot / (na * nb)
                }
            }
            Similarity::Euclidean => {
                let mut d = 0.0;
                for (x, y) in a.iter().zip(b.iter()) {
                    d += (x - y) * (x - y);
                }
                -d
            }
        }
    }
}

/// One learnable attention transform per task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyLearner {
    pub task_id: usize,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub pool: PoolMode,
}

impl KeyLearner {
    /// Query/key projections start random; the value projection starts at
    /// the identity (plus noise), so an untrained learner's key is close to
    /// the pooled tokens themselves. The first task's learner, which trains
    /// without a triplet term, therefore still scores high similarity on its
    /// own data, while later learners specialize away from this default.
    pub fn new(task_id: usize, embed_dim: usize, key_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = (6.0 / (embed_dim + key_dim) as f64).sqrt();
        let mut init = |s: f64| Array2::from_shape_fn((embed_dim, key_dim), |_| rng.gen_range(-s..s));
        let w_q = init(scale);
        let w_k = init(scale);
        let mut w_v = init(0.02);
        if embed_dim == key_dim {
            w_v += &Array2::eye(embed_dim);
        }
        Self {
            task_id,
            w_q,
            w_k,
            w_v,
            pool: PoolMode::Mean,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn key_dim(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn param_list(&self) -> Vec<&Array2<f64>> {
        vec![&self.w_q, &self.w_k, &self.w_v]
    }

    pub fn param_list_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.w_q, &mut self.w_k, &mut self.w_v]
    }

    fn check_tokens(&self, tokens: &TokenBatch) -> Result<()> {
        if tokens.embed_dim() != self.embed_dim() {
            return Err(Error::Config(format!(
                "token width {} does not match learner input width {}",
                tokens.embed_dim(),
                self.embed_dim()
            )));
        }
        tokens.assert_finite()
    }

    /// One self-attention pass through the learner's projections, pooled to
    /// a single key per input: `[batch, key_dim]`.
    pub fn compute_key(&self, tokens: &TokenBatch) -> Result<Array2<f64>> {
        self.check_tokens(tokens)?;
        let batch = tokens.batch_size();
        let mut keys = Array2::zeros((batch, self.key_dim()));
        for i in 0..batch {
            let t = tokens.sample(i);
            let q = t.dot(&self.w_q);
            let k = t.dot(&self.w_k);
            let v = t.dot(&self.w_v);
            let attended = backbone::attention(&q, &k, &v)?;
            let pooled = match self.pool {
                PoolMode::Cls => attended.row(0).to_owned(),
                PoolMode::Mean => attended.mean_axis(Axis(0)).expect("non-empty"),
            };
            keys.row_mut(i).assign(&pooled);
        }
        Ok(keys)
    }

    /// Bind the projections as gradient leaves, in `param_list` order.
    pub fn bind(&self, g: &mut Graph) -> BoundKeyLearner {
        BoundKeyLearner {
            w_q: g.param(self.w_q.clone()),
            w_k: g.param(self.w_k.clone()),
            w_v: g.param(self.w_v.clone()),
            pool: self.pool,
        }
    }
}

/// Key-learner projections bound onto a graph.
pub struct BoundKeyLearner {
    pub w_q: VarId,
    pub w_k: VarId,
    pub w_v: VarId,
    pool: PoolMode,
}

impl BoundKeyLearner {
    pub fn param_ids(&self) -> Vec<VarId> {
        vec![self.w_q, self.w_k, self.w_v]
    }

    /// Key of one sample's token constant: `[1, key_dim]`.
    pub fn compute_key_on_graph(&self, g: &mut Graph, tokens: VarId) -> VarId {
        let q = g.matmul(tokens, self.w_q);
        let k = g.matmul(tokens, self.w_k);
        let v = g.matmul(tokens, self.w_v);
        let attended = backbone::attention_on_graph(g, q, k, v);
        backbone::pooled_feature_on_graph(g, attended, self.pool)
    }
}

/// Hard negative for each sample: among learners with a different task id,
/// the key whose similarity to the pooled tokens is maximal. Ties break
/// toward the lowest task id. Errs with [`Error::NoNegative`] when no other
/// learner exists.
pub fn mine_negative(
    anchor_task: usize,
    tokens: &TokenBatch,
    all_learners: &[KeyLearner],
    similarity: Similarity,
) -> Result<Array2<f64>> {
    let others: Vec<&KeyLearner> = all_learners
        .iter()
        .filter(|l| l.task_id != anchor_task)
        .collect();
    if others.is_empty() {
        return Err(Error::NoNegative);
    }
    let pooled = backbone::pooled_feature(tokens, PoolMode::Mean)?;
    let keys: Vec<Array2<f64>> = others
        .iter()
        .map(|l| l.compute_key(tokens))
        .collect::<Result<_>>()?;

    let batch = tokens.batch_size();
    let key_dim = others[0].key_dim();
    let mut negatives = Array2::zeros((batch, key_dim));
    for i in 0..batch {
        let target = pooled.row(i).to_owned();
        let mut best: Option<(usize, f64)> = None;
        // `others` preserves registration order; scan ascending by task id.
        let mut order: Vec<usize> = (0..others.len()).collect();
        order.sort_by_key(|&j| others[j].task_id);
        for j in order {
            let key = keys[j].row(i).to_owned();
            let sim = similarity.score(&key, &target);
            if best.map_or(true, |(_, s)| sim > s) {
                best = Some((j, sim));
            }
        }
        let (j, _) = best.expect("non-empty others");
        negatives.row_mut(i).assign(&keys[j].row(i));
    }
    Ok(negatives)
}

fn check_same_shape(name: &str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "{name}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn squared_distance_rows(a: &Array2<f64>, b: &Array2<f64>, row: usize) -> f64 {
    let mut d = 0.0;
    for c in 0..a.ncols() {
        let diff = a[[row, c]] - b[[row, c]];
        d += diff * diff;
    }
    d
}

/// Hinge triplet loss summed over the batch:
/// `sum_i max(0, ||T_k - K_a||^2 - ||T_k - K_n||^2 + margin)`.
pub fn triplet_loss(
    t_k: &Array2<f64>,
    k_a: &Array2<f64>,
    k_n: &Array2<f64>,
    margin: f64,
) -> Result<f64> {
    check_same_shape("triplet anchor", t_k, k_a)?;
    check_same_shape("triplet negative", t_k, k_n)?;
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(Error::Config(format!("margin must be >= 0, got {margin}")));
    }
    let mut total = 0.0;
    for i in 0..t_k.nrows() {
        let d_a = squared_distance_rows(t_k, k_a, i);
        let d_n = squared_distance_rows(t_k, k_n, i);
        total += (d_a - d_n + margin).max(0.0);
    }
    Ok(total)
}

/// L1 penalty summed over the batch of keys.
pub fn l1_reg(k_a: &Array2<f64>) -> f64 {
    k_a.iter().map(|v| v.abs()).sum()
}

/// Combined key objective: `lambda_reg * L_reg + L_triplet`. The triplet
/// term is dropped when no negative exists (first task).
pub fn key_loss(
    t_k: &Array2<f64>,
    k_a: &Array2<f64>,
    k_n: Option<&Array2<f64>>,
    cfg: &KeyLossConfig,
) -> Result<f64> {
    cfg.validate()?;
    let triplet = match k_n {
        Some(neg) => triplet_loss(t_k, k_a, neg, cfg.margin)?,
        None => 0.0,
    };
    Ok(cfg.lambda_reg * l1_reg(k_a) + triplet)
}

/// Graph version of [`key_loss`] over per-sample anchor key variables.
/// `t_k` rows and negatives enter as constants; gradients flow only into
/// the anchor keys (and through them the current learner's projections).
pub fn key_loss_on_graph(
    g: &mut Graph,
    anchor_keys: &[VarId],
    t_k: &Array2<f64>,
    k_n: Option<&Array2<f64>>,
    cfg: &KeyLossConfig,
) -> VarId {
    assert_eq!(anchor_keys.len(), t_k.nrows(), "anchor/target batch");
    let mut terms = Vec::with_capacity(anchor_keys.len() + 1);
    let mut l1_terms = Vec::with_capacity(anchor_keys.len());
    for (i, &ka) in anchor_keys.iter().enumerate() {
        let tk_i = g.constant(t_k.row(i).to_owned().insert_axis(Axis(0)));
        if let Some(neg) = k_n {
            let d_a = g.squared_distance(tk_i, ka);
            let d_n = squared_distance_rows(t_k, neg, i);
            let shifted = g.add_scalar(d_a, cfg.margin - d_n);
            terms.push(g.relu(shifted));
        }
        let a = g.abs(ka);
        l1_terms.push(g.sum_all(a));
    }
    let l1 = g.add_n(&l1_terms);
    let weighted = g.scale(l1, cfg.lambda_reg);
    if terms.is_empty() {
        weighted
    } else {
        let triplet = g.add_n(&terms);
        g.add(triplet, weighted)
    }
}

/// Task whose key best matches each sample's pooled feature; ties break
/// toward the lowest task id. Deterministic for fixed weights.
pub fn match_task(
    tokens: &TokenBatch,
    all_learners: &[KeyLearner],
    similarity: Similarity,
) -> Result<Vec<usize>> {
    if all_learners.is_empty() {
        return Err(Error::Config("no key-learners registered".into()));
    }
    let pooled = backbone::pooled_feature(tokens, PoolMode::Mean)?;
    for l in all_learners {
        if l.key_dim() != tokens.embed_dim() {
            return Err(Error::Config(format!(
                "task {} key_dim {} cannot be compared with pooled width {}",
                l.task_id,
                l.key_dim(),
                tokens.embed_dim()
            )));
        }
    }
    let keys: Vec<Array2<f64>> = all_learners
        .iter()
        .map(|l| l.compute_key(tokens))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..all_learners.len()).collect();
    order.sort_by_key(|&j| all_learners[j].task_id);

    let batch = tokens.batch_size();
    let mut out = Vec::with_capacity(batch);
    for i in 0..batch {
        let target = pooled.row(i).to_owned();
        let mut best: Option<(usize, f64)> = None;
        for &j in &order {
            let key = keys[j].row(i).to_owned();
            let sim = similarity.score(&key, &target);
            if best.map_or(true, |(_, s)| sim > s) {
                best = Some((all_learners[j].task_id, sim));
            }
        }
        out.push(best.expect("non-empty learners").0);
    }
    Ok(out)
}
