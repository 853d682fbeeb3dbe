//! The SCoMMER training loop.
//!
//! Each step interleaves a task batch with a replay batch, draws per-sample
//! dropout masks, trains the working model on cross-entropy plus a
//! consistency term towards the long-term model's logits on the replayed
//! items, then consolidates, stores the task items, and counts activity.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{augment, Dataset, TaskSpec};
use crate::dropout::{ActivityState, DropoutConfig};
use crate::error::{Error, Result};
use crate::memory::{ema_update, ConsolidationConfig, EpisodicMemory, StoredItem};
use crate::net::{cross_entropy, mse, ForwardOptions, Mode, NetworkState, Sgd, SgdConfig};
use crate::rng::{permutation, RngStreams};
use crate::tensor::Tensor;

/// Random shift (and optional mirror) applied to training inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub pad: usize,
    #[serde(default)]
    pub flip: bool,
    /// Also augment replayed items (they are always stored raw).
    #[serde(default = "yes")]
    pub buffer: bool,
}

fn yes() -> bool {
    true
}

/// Which SCoMMER mechanisms are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub replay: bool,
    pub sparse_activations: bool,
    pub semantic_dropout: bool,
    pub long_term_memory: bool,
}

impl Components {
    pub const FULL: Components =
        Components { replay: true, sparse_activations: true, semantic_dropout: true, long_term_memory: true };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub replay_batch_size: usize,
    pub buffer_size: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub components: Components,
    pub ema: ConsolidationConfig,
    pub dropout: DropoutConfig,
    pub augment: Option<AugmentConfig>,
    /// Keep a per-step event log of schedule-relevant state changes.
    pub audit: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sgd: SgdConfig::default(),
            batch_size: 32,
            replay_batch_size: 32,
            buffer_size: 200,
            epochs: 5,
            gamma: 0.15,
            components: Components::FULL,
            ema: ConsolidationConfig::default(),
            dropout: DropoutConfig::default(),
            augment: None,
            audit: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.sgd.lr > 0.0 && self.sgd.lr.is_finite()) {
            errs.push(format!("training.lr must be positive, got {}", self.sgd.lr));
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) {
            errs.push(format!("training.momentum must lie in [0, 1), got {}", self.sgd.momentum));
        }
        if !(self.sgd.weight_decay >= 0.0 && self.sgd.weight_decay.is_finite()) {
            errs.push(format!("training.weight_decay must be non-negative, got {}", self.sgd.weight_decay));
        }
        if self.batch_size == 0 {
            errs.push("training.batch_size must be positive".into());
        }
        if self.epochs == 0 {
            errs.push("training.epochs must be at least 1".into());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            errs.push(format!("training.gamma must be non-negative, got {}", self.gamma));
        }
        if self.components.replay && (self.buffer_size == 0 || self.replay_batch_size == 0) {
            errs.push("replay needs buffer.size and buffer.batch_size to be positive".into());
        }
        if self.components.semantic_dropout && !self.components.sparse_activations {
            errs.push("semantic dropout works on k-WTA hooks and needs sparse activations".into());
        }
        for part in [self.ema.validate(), self.dropout.validate()] {
            if let Err(Error::Config(more)) = part {
                errs.extend(more);
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Loss of one step and its gradients with respect to both logit tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub ce: f64,
    pub consistency: f64,
    pub grad_all: Tensor,
    pub grad_mem: Option<Tensor>,
}

/// `CE(logits_all, labels_all) + gamma * MSE(logits_w_mem, z_s)`, with `z_s`
/// held constant. The consistency term is skipped when `mem` is `None`.
pub fn compute_loss(
    logits_all: &Tensor,
    labels_all: &[usize],
    mem: Option<(&Tensor, &Tensor)>,
    gamma: f64,
) -> Result<LossOutput> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(vec![format!("gamma must be non-negative, got {gamma}")]));
    }
    let (ce, grad_all) = cross_entropy(logits_all, labels_all)?;
    let (consistency, grad_mem) = match mem {
        Some((w, z)) => {
            let (l, mut g) = mse(w, z)?;
            g.data_mut().iter_mut().for_each(|v| *v *= gamma);
            (l, Some(g))
        }
        None => (0.0, None),
    };
    Ok(LossOutput { total: ce + gamma * consistency, ce, consistency, grad_all, grad_mem })
}

/// Bit-level digest of every parameter, for cheap change detection.
pub fn fingerprint(net: &NetworkState) -> u64 {
    let mut h = DefaultHasher::new();
    for p in net.params() {
        for v in p.data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

fn probability_fingerprint(activity: &ActivityState) -> (u64, u64) {
    let mut hs = DefaultHasher::new();
    let mut hh = DefaultHasher::new();
    for l in &activity.layers {
        l.semantic.iter().flatten().for_each(|v| v.to_bits().hash(&mut hs));
        l.hetero.iter().for_each(|v| v.to_bits().hash(&mut hh));
    }
    (hs.finish(), hh.finish())
}

/// One entry of the schedule audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEvent {
    Step {
        task: usize,
        epoch: usize,
        step: u64,
        ema_fired: bool,
        /// Long-term parameters differ from the start of the step.
        stable_changed: bool,
        /// Long-term parameters changed across the gradient update.
        stable_changed_by_gradient: bool,
        semantic_changed: bool,
        hetero_changed: bool,
        counter_delta: u64,
        /// Active units summed over task samples only.
        expected_delta: u64,
        buffer_samples: usize,
    },
    EpochEnd {
        task: usize,
        epoch: usize,
        semantic_refreshed: bool,
        semantic_changed: bool,
        hetero_changed: bool,
    },
    TaskEnd {
        task: usize,
        semantic_changed: bool,
        hetero_changed: bool,
    },
    Eval {
        task: usize,
        counters_changed: bool,
        working_changed: bool,
        stable_changed: bool,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditLog {
    pub events: Vec<AuditEvent>,
}

impl AuditLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Summary of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub ce: f64,
    pub consistency: f64,
    pub replayed: usize,
    pub ema_fired: bool,
}

/// Common surface of SCoMMER and the baselines, as used by experiments.
pub trait ContinualLearner {
    fn train_task(&mut self, data: &Dataset, task: &TaskSpec) -> Result<()>;
    fn working(&self) -> &NetworkState;
    fn stable(&self) -> Option<&NetworkState> {
        None
    }
    fn activity(&self) -> Option<&ActivityState> {
        None
    }
    fn audit_log(&self) -> Option<&AuditLog> {
        None
    }
    fn checkpoint(&self) -> Checkpoint;
    /// The model used for reported predictions.
    fn inference_model(&self) -> &NetworkState {
        self.stable().unwrap_or_else(|| self.working())
    }
}

/// Builds an interleaved input tensor from dataset rows, augmenting when set.
pub(crate) fn gather_inputs(
    data: &Dataset,
    indices: &[usize],
    augment_cfg: Option<&AugmentConfig>,
    rngs: &mut RngStreams,
) -> (Tensor, Vec<usize>) {
    match augment_cfg {
        None => data.batch(indices),
        Some(a) => {
            let shape = data.item_shape();
            let rows: Vec<Vec<f64>> =
                indices.iter().map(|&i| augment(data.item(i), shape, a.pad, a.flip, &mut rngs.augment)).collect();
            let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            let x = Tensor::stack_rows(shape, &refs).expect("augmentation keeps the item shape");
            (x, indices.iter().map(|&i| data.labels()[i]).collect())
        }
    }
}

pub(crate) fn augment_tensor(x: Tensor, a: &AugmentConfig, rngs: &mut RngStreams) -> Tensor {
    let shape = x.shape()[1..].to_vec();
    let rows: Vec<Vec<f64>> =
        (0..x.rows()).map(|i| augment(x.row(i), &shape, a.pad, a.flip, &mut rngs.augment)).collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Tensor::stack_rows(&shape, &refs).expect("augmentation keeps the item shape")
}

/// Working model, long-term model, episodic buffer and activity counters.
#[derive(Debug, Clone)]
pub struct Learner {
    cfg: TrainConfig,
    working: NetworkState,
    stable: Option<NetworkState>,
    memory: Option<EpisodicMemory>,
    activity: Option<ActivityState>,
    optimizer: Sgd,
    rngs: RngStreams,
    audit: Option<AuditLog>,
    steps: u64,
}

impl Learner {
    /// The long-term model starts as an exact copy of `working`.
    pub fn new(working: NetworkState, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let hooked = !working.hooks().is_empty();
        if cfg.components.sparse_activations != hooked {
            return Err(Error::Config(vec![format!(
                "sparse_activations = {} but the network has {} k-WTA hooks",
                cfg.components.sparse_activations,
                working.hooks().len()
            )]));
        }
        let mut rngs = RngStreams::new(seed);
        let activity = if cfg.components.semantic_dropout {
            let a = ActivityState::new(&working, cfg.dropout, &mut rngs.dropout)?;
            if a.layers.is_empty() {
                return Err(Error::Config(vec!["semantic dropout needs a dropout-enabled hook".into()]));
            }
            Some(a)
        } else {
            None
        };
        let memory = cfg.components.replay.then(|| EpisodicMemory::new(cfg.buffer_size, working.input_shape()));
        let stable = cfg.components.long_term_memory.then(|| working.clone());
        Ok(Learner {
            optimizer: Sgd::new(cfg.sgd),
            audit: cfg.audit.then(AuditLog::default),
            cfg,
            working,
            stable,
            memory,
            activity,
            rngs,
            steps: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn memory(&self) -> Option<&EpisodicMemory> {
        self.memory.as_ref()
    }

    pub fn audit(&self) -> Option<&AuditLog> {
        self.audit.as_ref()
    }

    pub fn audit_mut(&mut self) -> Option<&mut AuditLog> {
        self.audit.as_mut()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn counting(&self, epoch: usize) -> bool {
        !self.cfg.dropout.defer_counting || epoch >= self.cfg.dropout.warmup_epochs
    }

    /// One interleaved step on the task items `indices` of `data`.
    pub fn train_step(&mut self, data: &Dataset, indices: &[usize], task: usize, epoch: usize) -> Result<StepReport> {
        if indices.is_empty() {
            return Err(Error::InvalidInput("empty task batch".into()));
        }
        let audit_before = self.audit.is_some().then(|| {
            (
                self.stable.as_ref().map(fingerprint),
                self.activity.as_ref().map(probability_fingerprint),
                self.activity.as_ref().map_or(0, ActivityState::total_counts),
            )
        });

        let aug = self.cfg.augment;
        let (x_task, y_task) = gather_inputs(data, indices, aug.as_ref(), &mut self.rngs);
        let n_task = y_task.len();
        let replay =
            self.memory.as_ref().and_then(|m| m.sample_batch(self.cfg.replay_batch_size, &mut self.rngs.replay));
        let (x, labels, x_mem) = match replay {
            Some(r) => {
                let xm = match &aug {
                    Some(a) if a.buffer => augment_tensor(r.inputs, a, &mut self.rngs),
                    _ => r.inputs,
                };
                let mut labels = y_task.clone();
                labels.extend_from_slice(&r.labels);
                (x_task.concat_rows(&xm)?, labels, Some(xm))
            }
            None => (x_task, y_task.clone(), None),
        };

        let masks = match &self.activity {
            Some(a) => Some(a.batch_masks(&labels, &mut self.rngs.dropout)?),
            None => None,
        };
        let fwd =
            self.working.forward(&x, ForwardOptions { mode: Mode::Train, dropout: masks.as_ref(), frozen: None })?;

        let consistency = match (&self.stable, &x_mem) {
            (Some(stable), Some(xm)) if self.cfg.gamma > 0.0 => {
                let z_s = stable.forward(xm, ForwardOptions::eval())?.logits;
                let w_mem = fwd.logits.slice_rows(n_task, labels.len())?;
                Some((w_mem, z_s))
            }
            _ => None,
        };
        let loss = compute_loss(&fwd.logits, &labels, consistency.as_ref().map(|(w, z)| (w, z)), self.cfg.gamma)?;
        let mut grad = loss.grad_all;
        if let Some(gm) = &loss.grad_mem {
            let width = gm.row_len();
            let offset = n_task * width;
            for (g, m) in grad.data_mut()[offset..].iter_mut().zip(gm.data()) {
                *g += m;
            }
        }
        let grads = self.working.backward(&fwd, &grad)?;
        self.optimizer.step(&mut self.working, &grads)?;
        let stable_after_gradient = self.audit.is_some().then(|| self.stable.as_ref().map(fingerprint));

        let ema_fired = match &mut self.stable {
            Some(stable) => ema_update(stable, &self.working, &self.cfg.ema, &mut self.rngs.ema)?,
            None => false,
        };

        if let Some(mem) = &mut self.memory {
            for &i in indices {
                let item = StoredItem { input: data.item(i).to_vec(), label: data.labels()[i], task: Some(task) };
                mem.insert(item, &mut self.rngs.reservoir)?;
            }
        }

        let counting = self.counting(epoch);
        let mut expected_delta = 0;
        if let Some(activity) = &mut self.activity {
            let enabled: Vec<bool> = (0..labels.len()).map(|i| i < n_task && counting).collect();
            if self.audit.is_some() {
                for l in &activity.layers {
                    let rec = &fwd.activation_record[l.hook];
                    for (i, &on) in enabled.iter().enumerate() {
                        if on {
                            expected_delta += rec.row(i).iter().filter(|&&s| s != 0.0).count() as u64;
                        }
                    }
                }
            }
            activity.record_batch(&fwd.activation_record, &labels, &enabled);
        }

        self.steps += 1;
        if let Some((stable0, probs0, counts0)) = audit_before {
            let stable1 = self.stable.as_ref().map(fingerprint);
            let probs1 = self.activity.as_ref().map(probability_fingerprint);
            let counts1 = self.activity.as_ref().map_or(0, ActivityState::total_counts);
            let event = AuditEvent::Step {
                task,
                epoch,
                step: self.steps,
                ema_fired,
                stable_changed: stable0 != stable1,
                stable_changed_by_gradient: stable_after_gradient.flatten() != stable0,
                semantic_changed: probs0.map(|p| p.0) != probs1.map(|p| p.0),
                hetero_changed: probs0.map(|p| p.1) != probs1.map(|p| p.1),
                counter_delta: counts1 - counts0,
                expected_delta,
                buffer_samples: labels.len() - n_task,
            };
            self.audit.as_mut().expect("audit enabled").events.push(event);
        }

        Ok(StepReport {
            loss: loss.total,
            ce: loss.ce,
            consistency: loss.consistency,
            replayed: labels.len() - n_task,
            ema_fired,
        })
    }

    fn refresh(&mut self, f: impl FnOnce(&mut ActivityState) -> Result<()>) -> Result<(bool, bool)> {
        let Some(activity) = &mut self.activity else {
            return Ok((false, false));
        };
        let before = probability_fingerprint(activity);
        f(activity)?;
        let after = probability_fingerprint(activity);
        Ok((before.0 != after.0, before.1 != after.1))
    }
}

impl ContinualLearner for Learner {
    /// Runs the configured epochs over the task. Semantic probabilities are
    /// refreshed at the end of every epoch whose index reaches the warm-up;
    /// heterogeneous probabilities at the end of the task.
    fn train_task(&mut self, data: &Dataset, task: &TaskSpec) -> Result<()> {
        let n = task.train_indices.len();
        for epoch in 0..self.cfg.epochs {
            let order = permutation(n, &mut self.rngs.shuffle);
            for chunk in order.chunks(self.cfg.batch_size) {
                let idx: Vec<usize> = chunk.iter().map(|&i| task.train_indices[i]).collect();
                self.train_step(data, &idx, task.task_id, epoch)?;
            }
            let refresh = epoch >= self.cfg.dropout.warmup_epochs;
            let (semantic_changed, hetero_changed) =
                if refresh { self.refresh(ActivityState::refresh_semantic)? } else { (false, false) };
            if let Some(log) = &mut self.audit {
                log.events.push(AuditEvent::EpochEnd {
                    task: task.task_id,
                    epoch,
                    semantic_refreshed: refresh && self.activity.is_some(),
                    semantic_changed,
                    hetero_changed,
                });
            }
        }
        let (semantic_changed, hetero_changed) = self.refresh(ActivityState::refresh_hetero)?;
        if let Some(log) = &mut self.audit {
            log.events.push(AuditEvent::TaskEnd { task: task.task_id, semantic_changed, hetero_changed });
        }
        Ok(())
    }

    fn working(&self) -> &NetworkState {
        &self.working
    }

    fn stable(&self) -> Option<&NetworkState> {
        self.stable.as_ref()
    }

    fn activity(&self) -> Option<&ActivityState> {
        self.activity.as_ref()
    }

    fn audit_log(&self) -> Option<&AuditLog> {
        self.audit.as_ref()
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.add_network("working", &self.working);
        if let Some(s) = &self.stable {
            ck.add_network("stable", s);
        }
        if let Some(m) = &self.memory {
            m.export(&mut ck);
        }
        ck
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, data: Vec<f64>) -> Tensor {
        let cols = data.len() / rows;
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn zero_gamma_is_pure_cross_entropy() {
        let logits = t(2, vec![0.3, -1.0, 2.0, 0.5]);
        let w = t(1, vec![2.0, 0.5]);
        let z = t(1, vec![-3.0, 4.0]);
        let out = compute_loss(&logits, &[0, 1], Some((&w, &z)), 0.0).unwrap();
        let (ce, g) = cross_entropy(&logits, &[0, 1]).unwrap();
        assert_eq!(out.total, ce);
        assert_eq!(out.grad_all, g);
        assert!(out.grad_mem.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matching_targets_have_no_consistency_loss() {
        let logits = t(1, vec![1.0, 2.0]);
        let out = compute_loss(&logits, &[1], Some((&logits, &logits)), 0.15).unwrap();
        assert_eq!(out.consistency, 0.0);
    }

    #[test]
    fn two_class_loss_matches_scalar_evaluation() {
        // task row (label 0) and one memory row (label 1)
        let logits = t(2, vec![1.0, -1.0, 0.5, 0.25]);
        let z = t(1, vec![0.0, 1.0]);
        let w = logits.slice_rows(1, 2).unwrap();
        let out = compute_loss(&logits, &[0, 1], Some((&w, &z)), 0.15).unwrap();
        let ce0 = (1.0f64.exp() + (-1.0f64).exp()).ln() - 1.0;
        let ce1 = (0.5f64.exp() + 0.25f64.exp()).ln() - 0.25;
        let kr = (0.5f64.powi(2) + 0.75f64.powi(2)) / 2.0;
        let expected = (ce0 + ce1) / 2.0 + 0.15 * kr;
        assert!((out.total - expected).abs() <= 1e-12 * expected.abs());
    }

    #[test]
    fn negative_gamma_is_rejected() {
        let logits = t(1, vec![1.0, 2.0]);
        assert!(matches!(compute_loss(&logits, &[0], None, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn config_errors_are_itemized() {
        let mut cfg = TrainConfig::default();
        cfg.sgd.lr = 0.0;
        cfg.gamma = -1.0;
        cfg.epochs = 0;
        cfg.ema.rate = 2.0;
        match cfg.validate() {
            Err(Error::Config(items)) => assert_eq!(items.len(), 4, "{items:?}"),
            other => panic!("{other:?}"),
        }
    }
}
