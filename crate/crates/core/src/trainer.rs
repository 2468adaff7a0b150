//! Task-sequential training and class-incremental evaluation.
//!
//! Training a task instantiates a fresh key-learner and prompter for it and
//! optimizes, per batch: (1) a prompt-free forward pass for tokens, (2) the
//! current learner's anchor key and its hardest competing key, (3) the key
//! objective, (4) per-sample prompts injected into a second, prompted
//! forward pass, (5) masked cross-entropy over classes seen so far, and
//! (6) one optimizer step on the current learner, current prompter, and the
//! shared head only. The backbone and every previous task's modules stay
//! untouched.
//!
//! Evaluation never sees task ids: each test sample is matched to a task by
//! key similarity, prompted with that task's generator, and classified over
//! all classes seen so far. Baselines (`ftseq`, `upper_bound`) share the
//! backbone and head machinery with no keys or prompts.

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, VarId};
use crate::backbone::{
    pooled_feature, pooled_feature_on_graph, Backbone, BackboneConfig, PoolMode, PromptSchedule,
    TokenBatch,
};
use crate::data::{LabeledSet, TaskStream};
use crate::error::{Error, Result};
use crate::key_learner::{self, KeyLearner, KeyLossConfig, Similarity};
use crate::metrics::{compute_metrics, AccMatrix, ContinualReport};
use crate::optim::{Adam, AdamConfig};
use crate::prompter::TaskPrompter;

/// Logit value for classes masked out of the current prediction range.
const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    IncPrompt,
    FtSeq,
    UpperBound,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::IncPrompt => "incprompt",
            Method::FtSeq => "ftseq",
            Method::UpperBound => "upper_bound",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "incprompt" => Ok(Method::IncPrompt),
            "ftseq" => Ok(Method::FtSeq),
            "upper_bound" => Ok(Method::UpperBound),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected incprompt, ftseq, or upper_bound)"
            ))),
        }
    }
}

/// How evaluation picks the prompter for a test sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Key matching (task id stays hidden) — the protocol default.
    Matched,
    /// Task id forced (diagnostic upper reference for matching quality).
    Oracle,
}

impl SelectionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionMode::Matched => "matched",
            SelectionMode::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Plain sum over the batch.
    Sum,
    /// Batch mean; the scale folds into the learning rate.
    Mean,
}

/// Which classes the training softmax ranges over. Evaluation always ranges
/// over every class seen so far, regardless of this setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMask {
    /// Only the task's own label set — the per-task objective; head columns
    /// of other tasks receive no gradient.
    CurrentTask,
    /// All classes seen so far — plain sequential fine-tuning, which
    /// actively suppresses earlier classes (the classic forgetting mode).
    Seen,
}

/// Cross-entropy between logits and integer labels. The reduction defaults
/// to [`Reduction::Sum`] in callers that follow the written objective;
/// training batches use the mean.
pub fn task_loss(logits: &Array2<f64>, labels: &[usize], reduction: Reduction) -> Result<f64> {
    if logits.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows vs {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let classes = logits.ncols();
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Data(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[label];
    }
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / labels.len().max(1) as f64,
    })
}

/// Composite objective: task loss plus key loss.
pub fn total_loss(task_l: f64, key_l: f64) -> f64 {
    task_l + key_l
}

/// Shared growing classification head over every class the stream can
/// introduce; logits of classes outside the active set are masked to a
/// large negative value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl ClassifierHead {
    pub fn new(embed_dim: usize, total_classes: usize) -> Self {
        Self {
            weight: Array2::zeros((embed_dim, total_classes)),
            bias: Array2::zeros((1, total_classes)),
        }
    }

    pub fn total_classes(&self) -> usize {
        self.weight.ncols()
    }

    pub fn param_list(&self) -> Vec<&Array2<f64>> {
        vec![&self.weight, &self.bias]
    }

    pub fn param_list_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.weight, &mut self.bias]
    }

    /// 0 for active classes, [`MASK_NEG`] elsewhere.
    pub fn mask_row(&self, active: &[usize]) -> Array2<f64> {
        let mut mask = Array2::from_elem((1, self.total_classes()), MASK_NEG);
        for &c in active {
            mask[[0, c]] = 0.0;
        }
        mask
    }

    /// Raw logits for pooled features `[batch, d]`.
    pub fn logits(&self, features: &Array2<f64>) -> Array2<f64> {
        features.dot(&self.weight) + &self.bias.row(0)
    }

    /// Logits with inactive classes masked.
    pub fn masked_logits(&self, features: &Array2<f64>, active: &[usize]) -> Array2<f64> {
        let mask = self.mask_row(&active.to_vec());
        self.logits(features) + &mask.row(0)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundHead {
        let (weight, bias) = if trainable {
            (g.param(self.weight.clone()), g.param(self.bias.clone()))
        } else {
            (g.constant(self.weight.clone()), g.constant(self.bias.clone()))
        };
        BoundHead { weight, bias }
    }
}

pub struct BoundHead {
    pub weight: VarId,
    pub bias: VarId,
}

impl BoundHead {
    pub fn param_ids(&self) -> Vec<VarId> {
        vec![self.weight, self.bias]
    }

    pub fn logits_on_graph(&self, g: &mut Graph, features: VarId) -> VarId {
        let raw = g.matmul(features, self.weight);
        g.add_row_broadcast(raw, self.bias)
    }
}

/// Negative log-likelihood of one sample's masked logits row.
fn cross_entropy_on_graph(g: &mut Graph, masked_logits: VarId, label: usize) -> VarId {
    let lsm = g.log_softmax_rows(masked_logits);
    let picked = g.slice_cols(lsm, label, label + 1);
    g.scale(picked, -1.0)
}

/// Deterministic argmax: lowest index wins ties.
fn argmax_row(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub eval_batch: usize,
    pub lr: f64,
    /// Key width; defaults to the backbone embedding width.
    pub key_dim: Option<usize>,
    /// Prompter hidden width; defaults to the embedding width.
    pub prompter_hidden: Option<usize>,
    pub similarity: Similarity,
    pub selection: SelectionMode,
    pub loss_reduction: Reduction,
    /// `None` resolves to the method convention: the per-task label set
    /// for incprompt, all seen classes for the baselines.
    pub train_mask: Option<TrainMask>,
    /// Pooling feeding the classifier head.
    pub classifier_pool: PoolMode,
    /// FT-seq only: also fine-tune the backbone (requires `frozen = false`).
    pub ftseq_train_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_task: 5,
            batch_size: 32,
            eval_batch: 64,
            lr: 1e-3,
            key_dim: None,
            prompter_hidden: None,
            similarity: Similarity::Cosine,
            selection: SelectionMode::Matched,
            loss_reduction: Reduction::Mean,
            train_mask: None,
            classifier_pool: PoolMode::Cls,
            ftseq_train_backbone: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_task == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config(
                "epochs_per_task, batch_size, and eval_batch must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Loss trace of one trained task.
#[derive(Debug, Clone)]
pub struct TaskTrainStats {
    pub task_id: usize,
    pub first_batch_loss: f64,
    pub last_batch_loss: f64,
    pub steps: usize,
}

/// Accuracy row and selection tallies of one evaluation pass.
#[derive(Debug, Clone)]
pub struct EvalResult {
    /// Accuracy on tasks `0..=upto`.
    pub per_task_acc: Vec<f64>,
    /// `[num_tasks][num_tasks]` selection counts (all zero for baselines).
    pub histogram: Vec<Vec<usize>>,
}

/// The continual-learning engine for one method.
///
/// Key-learners and prompters are initialized as a bank up front, one slot
/// per expected task. Training task `t` touches only slot `t`; negatives
/// are mined against the whole rest of the bank, so even the first task
/// faces a hard identity-initialized competitor and receives the full
/// triplet pull. Untrained slots never participate in evaluation.
#[derive(Debug)]
pub struct Trainer {
    pub method: Method,
    pub backbone: Backbone,
    pub head: ClassifierHead,
    pub learners: Vec<KeyLearner>,
    pub prompters: Vec<TaskPrompter>,
    pub schedule: PromptSchedule,
    pub key_cfg: KeyLossConfig,
    pub cfg: TrainConfig,
    pub seed: u64,
    /// Classes introduced by each trained task, in training order.
    pub class_map: Vec<Vec<usize>>,
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Trainer {
    pub fn new(
        method: Method,
        backbone_cfg: BackboneConfig,
        schedule: PromptSchedule,
        key_cfg: KeyLossConfig,
        cfg: TrainConfig,
        num_tasks: usize,
        total_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        backbone_cfg.validate()?;
        schedule.validate(&backbone_cfg)?;
        key_cfg.validate()?;
        cfg.validate()?;
        if total_classes == 0 {
            return Err(Error::Config("total_classes must be positive".into()));
        }
        if method == Method::IncPrompt && !backbone_cfg.frozen {
            return Err(Error::Config(
                "incprompt requires a frozen backbone (frozen = true)".into(),
            ));
        }
        if cfg.ftseq_train_backbone && backbone_cfg.frozen {
            return Err(Error::Config(
                "ftseq_train_backbone requires frozen = false".into(),
            ));
        }
        if let Some(kd) = cfg.key_dim {
            if kd != backbone_cfg.embed_dim {
                return Err(Error::Config(format!(
                    "key_dim {kd} must equal embed_dim {} so keys compare with pooled tokens",
                    backbone_cfg.embed_dim
                )));
            }
        }
        if method == Method::IncPrompt && num_tasks == 0 {
            return Err(Error::Config("incprompt needs num_tasks >= 1".into()));
        }
        let backbone = Backbone::new(backbone_cfg, &mut sub_rng(seed, 10))?;
        let head = ClassifierHead::new(backbone.cfg.embed_dim, total_classes);
        let d = backbone.cfg.embed_dim;
        let (learners, prompters) = if method == Method::IncPrompt {
            let key_dim = cfg.key_dim.unwrap_or(d);
            let learners = (0..num_tasks)
                .map(|t| KeyLearner::new(t, d, key_dim, &mut sub_rng(seed, 100 + t as u64)))
                .collect();
            let prompters = (0..num_tasks)
                .map(|t| {
                    TaskPrompter::new(t, d, cfg.prompter_hidden, &schedule, &mut sub_rng(seed, 200 + t as u64))
                })
                .collect();
            (learners, prompters)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(Self {
            method,
            backbone,
            head,
            learners,
            prompters,
            schedule,
            key_cfg,
            cfg,
            seed,
            class_map: Vec::new(),
        })
    }

    pub fn tasks_trained(&self) -> usize {
        self.class_map.len()
    }

    /// Global class ids active after `upto` tasks (0-based, inclusive).
    fn active_classes(&self, upto: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for classes in self.class_map.iter().take(upto + 1) {
            out.extend(classes.iter().copied());
        }
        out
    }

    fn resolved_train_mask(&self) -> TrainMask {
        self.cfg.train_mask.unwrap_or(match self.method {
            Method::IncPrompt => TrainMask::CurrentTask,
            Method::FtSeq | Method::UpperBound => TrainMask::Seen,
        })
    }

    /// Classes the training softmax of task `task_id` ranges over.
    fn train_classes(&self, task_id: usize) -> Vec<usize> {
        match self.resolved_train_mask() {
            TrainMask::CurrentTask => self.class_map[task_id].clone(),
            TrainMask::Seen => self.active_classes(task_id),
        }
    }

    /// Train the next task in stream order. The stream surrenders the
    /// task's training data; it is dropped when this returns.
    pub fn train_task(&mut self, stream: &mut TaskStream, task_id: usize) -> Result<TaskTrainStats> {
        if task_id != self.tasks_trained() {
            return Err(Error::Protocol(format!(
                "train_task({task_id}) called but {} tasks are trained",
                self.tasks_trained()
            )));
        }
        let class_ids = stream.task(task_id).class_ids.clone();
        let train = stream.take_train(task_id)?;
        if train.is_empty() {
            return Err(Error::Data(format!("task {task_id} has no training data")));
        }
        self.class_map.push(class_ids);

        let stats = match self.method {
            Method::IncPrompt => self.train_incprompt_task(task_id, &train)?,
            Method::FtSeq => {
                let mask_classes = self.train_classes(task_id);
                self.train_plain(task_id, &train, &mask_classes)?
            }
            Method::UpperBound => {
                return Err(Error::Protocol(
                    "upper_bound trains jointly; use run_stream".into(),
                ))
            }
        };
        Ok(stats)
    }

    fn train_incprompt_task(&mut self, task_id: usize, train: &LabeledSet) -> Result<TaskTrainStats> {
        // Work on copies of this task's bank slots; the bank keeps the
        // untrained anchor, which negative mining excludes by task id.
        let mut learner = self.learners[task_id].clone();
        let mut prompter = self.prompters[task_id].clone();
        let mut adam = Adam::new(AdamConfig::with_lr(self.cfg.lr));
        let mut shuffle_rng = sub_rng(self.seed, 300 + task_id as u64);
        let mask_row = self.head.mask_row(&self.train_classes(task_id));

        let n = train.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut first_batch_loss = None;
        let mut last_batch_loss = 0.0;
        let mut steps = 0;

        for _epoch in 0..self.cfg.epochs_per_task {
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(self.cfg.batch_size) {
                let images = select_images(&train.images, chunk);
                let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
                let batch = chunk.len();

                // Pass 1: prompt-free tokens (no gradients anywhere).
                let enc0 = self
                    .backbone
                    .forward(&images, &Default::default(), &PromptSchedule::empty())?;
                let t_k = pooled_feature(&enc0, PoolMode::Mean)?;
                let k_n = match key_learner::mine_negative(
                    task_id,
                    &enc0,
                    &self.learners,
                    self.cfg.similarity,
                ) {
                    Ok(neg) => Some(neg),
                    Err(Error::NoNegative) => None,
                    Err(e) => return Err(e),
                };

                // Pass 2 on the graph: keys, prompts, prompted forward, CE.
                let mut g = Graph::new();
                let bound_learner = learner.bind(&mut g);
                let bound_prompter = prompter.bind(&mut g);
                let bound_head = self.head.bind(&mut g, true);
                let bound_backbone = self.backbone.bind(&mut g, false);
                let mask = g.constant(mask_row.clone());

                let mut anchors = Vec::with_capacity(batch);
                let mut ce_terms = Vec::with_capacity(batch);
                for i in 0..batch {
                    let tokens0 = g.constant(enc0.sample(i));
                    anchors.push(bound_learner.compute_key_on_graph(&mut g, tokens0));

                    let pooled0 = g.constant(t_k.row(i).to_owned().insert_axis(Axis(0)));
                    let pairs = bound_prompter.generate_on_graph(&mut g, pooled0);
                    let prompt_vars: std::collections::BTreeMap<usize, (VarId, VarId)> = self
                        .schedule
                        .layers
                        .iter()
                        .copied()
                        .zip(pairs)
                        .collect();

                    let embedded = self
                        .backbone
                        .embed_on_graph(&mut g, &bound_backbone, &select_images(&images, &[i]));
                    let states = self.backbone.blocks_on_graph(
                        &mut g,
                        &bound_backbone,
                        embedded[0],
                        &prompt_vars,
                        &self.schedule,
                    );
                    let feat = pooled_feature_on_graph(
                        &mut g,
                        *states.last().expect("blocks"),
                        self.cfg.classifier_pool,
                    );
                    let logits = bound_head.logits_on_graph(&mut g, feat);
                    let masked = g.add(logits, mask);
                    ce_terms.push(cross_entropy_on_graph(&mut g, masked, labels[i]));
                }

                let ce_sum = g.add_n(&ce_terms);
                let key_raw = key_learner::key_loss_on_graph(
                    &mut g,
                    &anchors,
                    &t_k,
                    k_n.as_ref(),
                    &self.key_cfg,
                );
                // One reduction for both terms keeps their balance
                // batch-size independent.
                let (task_l, key_l) = match self.cfg.loss_reduction {
                    Reduction::Sum => (ce_sum, key_raw),
                    Reduction::Mean => {
                        let inv = 1.0 / batch as f64;
                        (g.scale(ce_sum, inv), g.scale(key_raw, inv))
                    }
                };
                let total = g.add(task_l, key_l);
                g.backward(total);

                let loss_value = g.scalar_value(total);
                if first_batch_loss.is_none() {
                    first_batch_loss = Some(loss_value);
                }
                last_batch_loss = loss_value;
                steps += 1;

                let ids: Vec<VarId> = bound_learner
                    .param_ids()
                    .into_iter()
                    .chain(bound_prompter.param_ids())
                    .chain(bound_head.param_ids())
                    .collect();
                let grads: Vec<Option<Array2<f64>>> =
                    ids.iter().map(|&id| g.grad(id).cloned()).collect();
                let grad_refs: Vec<Option<&Array2<f64>>> =
                    grads.iter().map(|g| g.as_ref()).collect();
                let mut params = learner.param_list_mut();
                params.extend(prompter.param_list_mut());
                params.extend(self.head.param_list_mut());
                adam.step(&mut params, &grad_refs);
            }
        }

        self.learners[task_id] = learner;
        self.prompters[task_id] = prompter;
        Ok(TaskTrainStats {
            task_id,
            first_batch_loss: first_batch_loss.unwrap_or(0.0),
            last_batch_loss,
            steps,
        })
    }

    /// Head-only (optionally full-backbone) cross-entropy training shared by
    /// FT-seq and the joint upper bound.
    fn train_plain(
        &mut self,
        task_id: usize,
        train: &LabeledSet,
        mask_classes: &[usize],
    ) -> Result<TaskTrainStats> {
        let train_backbone = self.cfg.ftseq_train_backbone && !self.backbone.cfg.frozen;
        let mut adam = Adam::new(AdamConfig::with_lr(self.cfg.lr));
        let mut shuffle_rng = sub_rng(self.seed, 300 + task_id as u64);
        let mask_row = self.head.mask_row(mask_classes);

        let n = train.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut first_batch_loss = None;
        let mut last_batch_loss = 0.0;
        let mut steps = 0;

        for _epoch in 0..self.cfg.epochs_per_task {
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(self.cfg.batch_size) {
                let images = select_images(&train.images, chunk);
                let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
                let batch = chunk.len();

                let mut g = Graph::new();
                let bound_head = self.head.bind(&mut g, true);
                let mask = g.constant(mask_row.clone());
                let mut ce_terms = Vec::with_capacity(batch);

                let backbone_ids = if train_backbone {
                    let bound_backbone = self.backbone.bind(&mut g, true);
                    let embedded = self.backbone.embed_on_graph(&mut g, &bound_backbone, &images);
                    for (i, &emb) in embedded.iter().enumerate() {
                        let states = self.backbone.blocks_on_graph(
                            &mut g,
                            &bound_backbone,
                            emb,
                            &Default::default(),
                            &PromptSchedule::empty(),
                        );
                        let feat = pooled_feature_on_graph(
                            &mut g,
                            *states.last().expect("blocks"),
                            self.cfg.classifier_pool,
                        );
                        let logits = bound_head.logits_on_graph(&mut g, feat);
                        let masked = g.add(logits, mask);
                        ce_terms.push(cross_entropy_on_graph(&mut g, masked, labels[i]));
                    }
                    Some(bound_backbone)
                } else {
                    let enc0 = self
                        .backbone
                        .forward(&images, &Default::default(), &PromptSchedule::empty())?;
                    let feats = pooled_feature(&enc0, self.cfg.classifier_pool)?;
                    for i in 0..batch {
                        let feat = g.constant(feats.row(i).to_owned().insert_axis(Axis(0)));
                        let logits = bound_head.logits_on_graph(&mut g, feat);
                        let masked = g.add(logits, mask);
                        ce_terms.push(cross_entropy_on_graph(&mut g, masked, labels[i]));
                    }
                    None
                };

                let ce_sum = g.add_n(&ce_terms);
                let loss = match self.cfg.loss_reduction {
                    Reduction::Sum => ce_sum,
                    Reduction::Mean => g.scale(ce_sum, 1.0 / batch as f64),
                };
                g.backward(loss);

                let loss_value = g.scalar_value(loss);
                if first_batch_loss.is_none() {
                    first_batch_loss = Some(loss_value);
                }
                last_batch_loss = loss_value;
                steps += 1;

                let mut ids = bound_head.param_ids();
                if let Some(bb) = &backbone_ids {
                    ids.extend_from_slice(bb.param_ids());
                }
                let grads: Vec<Option<Array2<f64>>> =
                    ids.iter().map(|&id| g.grad(id).cloned()).collect();
                let grad_refs: Vec<Option<&Array2<f64>>> =
                    grads.iter().map(|g| g.as_ref()).collect();
                let mut params = self.head.param_list_mut();
                if backbone_ids.is_some() {
                    params.extend(self.backbone.param_list_mut());
                }
                adam.step(&mut params, &grad_refs);
            }
        }

        Ok(TaskTrainStats {
            task_id,
            first_batch_loss: first_batch_loss.unwrap_or(0.0),
            last_batch_loss,
            steps,
        })
    }

    /// Class-incremental evaluation of every task `j <= upto`. No task ids
    /// are consumed unless the selection mode is `Oracle`; matched selection
    /// recovers them from key similarity. Pure in the trainer state: the
    /// same state and stream always produce the same result.
    pub fn evaluate(&self, stream: &TaskStream, upto: usize) -> Result<EvalResult> {
        if upto >= self.tasks_trained() && self.method != Method::UpperBound {
            return Err(Error::Protocol(format!(
                "evaluate up to task {upto} but only {} tasks trained",
                self.tasks_trained()
            )));
        }
        let num_tasks = stream.num_tasks();
        let active = match self.method {
            Method::UpperBound => self.active_classes(self.class_map.len().saturating_sub(1)),
            _ => self.active_classes(upto),
        };
        let mut histogram = vec![vec![0usize; num_tasks]; num_tasks];
        let mut per_task_acc = Vec::with_capacity(upto + 1);

        for j in 0..=upto {
            let test = &stream.task(j).test;
            let mut correct = 0usize;
            let mut idx = 0;
            while idx < test.len() {
                let end = (idx + self.cfg.eval_batch).min(test.len());
                let chunk: Vec<usize> = (idx..end).collect();
                let images = select_images(&test.images, &chunk);
                let labels: Vec<usize> = chunk.iter().map(|&i| test.labels[i]).collect();

                let predictions = match self.method {
                    Method::IncPrompt => self.predict_prompted(
                        &images,
                        j,
                        &active,
                        &self.learners[..self.tasks_trained()],
                        &mut histogram[j],
                    )?,
                    Method::FtSeq | Method::UpperBound => {
                        let enc0 = self.backbone.forward(
                            &images,
                            &Default::default(),
                            &PromptSchedule::empty(),
                        )?;
                        let feats = pooled_feature(&enc0, self.cfg.classifier_pool)?;
                        let logits = self.head.masked_logits(&feats, &active);
                        logits.rows().into_iter().map(argmax_row).collect()
                    }
                };
                for (p, l) in predictions.iter().zip(&labels) {
                    if p == l {
                        correct += 1;
                    }
                }
                idx = end;
            }
            per_task_acc.push(correct as f64 / test.len().max(1) as f64);
        }
        Ok(EvalResult {
            per_task_acc,
            histogram,
        })
    }

    /// Prompted predictions for one batch; also tallies prompter selections.
    fn predict_prompted(
        &self,
        images: &crate::backbone::ImageBatch,
        true_task: usize,
        active: &[usize],
        trained_learners: &[KeyLearner],
        histogram_row: &mut [usize],
    ) -> Result<Vec<usize>> {
        let batch = images.shape()[0];
        // Pass 1: prompt-free tokens for matching and prompt generation.
        let embedded = self.backbone.patch_embed(images)?;
        let enc0 = self
            .backbone
            .encode(&embedded, &Default::default(), &PromptSchedule::empty())?;

        let selected: Vec<usize> = match self.cfg.selection {
            SelectionMode::Matched => {
                key_learner::match_task(&enc0, trained_learners, self.cfg.similarity)?
            }
            SelectionMode::Oracle => vec![true_task; batch],
        };
        for &s in &selected {
            histogram_row[s] += 1;
        }

        // Group samples by selected prompter so pass 2 stays batched.
        let mut predictions = vec![0usize; batch];
        let mut by_task: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, &s) in selected.iter().enumerate() {
            by_task.entry(s).or_default().push(i);
        }
        for (task, members) in by_task {
            let tokens0 = select_tokens(&enc0, &members);
            let prompt = self.prompters[task].generate_prompt(&tokens0)?;
            let prompt_map = prompt.to_prompt_map(&self.schedule)?;
            let emb = select_tokens(&embedded, &members);
            let encoded = self.backbone.encode(&emb, &prompt_map, &self.schedule)?;
            let feats = pooled_feature(&encoded, self.cfg.classifier_pool)?;
            let logits = self.head.masked_logits(&feats, active);
            for (row, &i) in members.iter().enumerate() {
                predictions[i] = argmax_row(logits.row(row));
            }
        }
        Ok(predictions)
    }

    /// Train on the whole stream and evaluate after each task (or once,
    /// jointly, for the upper bound), producing the final report.
    pub fn run_stream(&mut self, stream: &mut TaskStream) -> Result<ContinualReport> {
        let num_tasks = stream.num_tasks();
        let mut acc_matrix: AccMatrix = Vec::new();
        let mut histogram = vec![vec![0usize; num_tasks]; num_tasks];

        match self.method {
            Method::IncPrompt | Method::FtSeq => {
                for t in 0..num_tasks {
                    self.train_task(stream, t)?;
                    let eval = self.evaluate(stream, t)?;
                    acc_matrix.push(eval.per_task_acc);
                    histogram = eval.histogram;
                }
            }
            Method::UpperBound => {
                // Joint training over the union of all task data.
                let mut sets = Vec::with_capacity(num_tasks);
                for t in 0..num_tasks {
                    self.class_map.push(stream.task(t).class_ids.clone());
                    sets.push(stream.take_train(t)?);
                }
                let joint = concat_labeled(&sets);
                drop(sets);
                let mask_classes = self.active_classes(num_tasks - 1);
                self.train_plain(0, &joint, &mask_classes)?;
                let eval = self.evaluate(stream, num_tasks - 1)?;
                acc_matrix.push(eval.per_task_acc);
            }
        }

        let (avg_acc, forgetting, forgetting_defined) = compute_metrics(&acc_matrix)?;
        let selection_mode = match self.method {
            Method::IncPrompt => self.cfg.selection.as_str(),
            _ => "none",
        };
        Ok(ContinualReport {
            seed: self.seed,
            method: self.method.as_str().to_string(),
            acc_matrix,
            avg_acc,
            forgetting,
            forgetting_defined,
            selection_histogram: histogram,
            selection_mode: selection_mode.to_string(),
            prompt_length: self.schedule.prompt_length,
            prompt_depth: self.schedule.num_prompted_layers(),
        })
    }
}

/// Run one of the reference baselines over the stream.
pub fn run_baseline(
    stream: &mut TaskStream,
    method: Method,
    backbone_cfg: BackboneConfig,
    cfg: TrainConfig,
    seed: u64,
) -> Result<ContinualReport> {
    if method == Method::IncPrompt {
        return Err(Error::Config("run_baseline expects ftseq or upper_bound".into()));
    }
    let mut trainer = Trainer::new(
        method,
        backbone_cfg,
        PromptSchedule::empty(),
        KeyLossConfig::default(),
        cfg,
        stream.num_tasks(),
        stream.total_classes,
        seed,
    )?;
    trainer.run_stream(stream)
}

fn select_images(images: &crate::backbone::ImageBatch, idx: &[usize]) -> crate::backbone::ImageBatch {
    let dim = images.dim();
    let mut out = crate::backbone::ImageBatch::zeros((idx.len(), dim.1, dim.2, dim.3));
    for (row, &i) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), row)
            .assign(&images.index_axis(Axis(0), i));
    }
    out
}

fn select_tokens(tokens: &TokenBatch, idx: &[usize]) -> TokenBatch {
    let (_, s, d) = tokens.tokens.dim();
    let mut out = Array3::zeros((idx.len(), s, d));
    for (row, &i) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), row)
            .assign(&tokens.tokens.index_axis(Axis(0), i));
    }
    TokenBatch {
        tokens: out,
        layer_index: tokens.layer_index,
        includes_cls: tokens.includes_cls,
    }
}

fn concat_labeled(sets: &[LabeledSet]) -> LabeledSet {
    let total: usize = sets.iter().map(|s| s.len()).sum();
    let dim = sets[0].images.dim();
    let mut images = crate::backbone::ImageBatch::zeros((total, dim.1, dim.2, dim.3));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for s in sets {
        for i in 0..s.len() {
            images
                .index_axis_mut(Axis(0), row)
                .assign(&s.images.index_axis(Axis(0), i));
            row += 1;
        }
        labels.extend_from_slice(&s.labels);
    }
    LabeledSet {
        images,
        labels,
        paths: None,
    }
}
