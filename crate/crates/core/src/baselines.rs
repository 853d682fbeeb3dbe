//! Reference learners: experience replay (ER) and plain fine-tuning (SGD).
//! Joint training is SGD over the union of all tasks.

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, TaskSpec};
use crate::error::{Error, Result};
use crate::memory::{EpisodicMemory, StoredItem};
use crate::net::{cross_entropy, ForwardOptions, NetworkState, Sgd, SgdConfig};
use crate::rng::{permutation, RngStreams};
use crate::trainer::{augment_tensor, gather_inputs, AugmentConfig, ContinualLearner};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub replay_batch_size: usize,
    pub epochs: usize,
    pub augment: Option<AugmentConfig>,
}

/// A single model trained with cross-entropy, optionally rehearsing from a
/// reservoir buffer.
#[derive(Debug, Clone)]
pub struct Baseline {
    cfg: BaselineConfig,
    net: NetworkState,
    memory: Option<EpisodicMemory>,
    optimizer: Sgd,
    rngs: RngStreams,
}

impl Baseline {
    pub fn er(net: NetworkState, buffer_size: usize, cfg: BaselineConfig, seed: u64) -> Result<Self> {
        if buffer_size == 0 || cfg.replay_batch_size == 0 {
            return Err(Error::Config(vec!["ER needs a positive buffer size and replay batch size".into()]));
        }
        let memory = Some(EpisodicMemory::new(buffer_size, net.input_shape()));
        Self::build(net, memory, cfg, seed)
    }

    pub fn sgd(net: NetworkState, cfg: BaselineConfig, seed: u64) -> Result<Self> {
        Self::build(net, None, cfg, seed)
    }

    fn build(net: NetworkState, memory: Option<EpisodicMemory>, cfg: BaselineConfig, seed: u64) -> Result<Self> {
        if cfg.batch_size == 0 || cfg.epochs == 0 {
            return Err(Error::Config(vec!["batch size and epochs must be positive".into()]));
        }
        Ok(Baseline { optimizer: Sgd::new(cfg.sgd), rngs: RngStreams::new(seed), cfg, net, memory })
    }

    pub fn memory(&self) -> Option<&EpisodicMemory> {
        self.memory.as_ref()
    }

    /// Returns the batch loss.
    pub fn train_step(&mut self, data: &Dataset, indices: &[usize], task: usize) -> Result<f64> {
        let aug = self.cfg.augment;
        let (mut x, mut labels) = gather_inputs(data, indices, aug.as_ref(), &mut self.rngs);
        if let Some(mem) = &self.memory {
            if let Some(r) = mem.sample_batch(self.cfg.replay_batch_size, &mut self.rngs.replay) {
                let xm = match &aug {
                    Some(a) if a.buffer => augment_tensor(r.inputs, a, &mut self.rngs),
                    _ => r.inputs,
                };
                x = x.concat_rows(&xm)?;
                labels.extend_from_slice(&r.labels);
            }
        }
        let fwd = self.net.forward(&x, ForwardOptions::train())?;
        let (loss, grad) = cross_entropy(&fwd.logits, &labels)?;
        let grads = self.net.backward(&fwd, &grad)?;
        self.optimizer.step(&mut self.net, &grads)?;
        if let Some(mem) = &mut self.memory {
            for &i in indices {
                let item = StoredItem { input: data.item(i).to_vec(), label: data.labels()[i], task: Some(task) };
                mem.insert(item, &mut self.rngs.reservoir)?;
            }
        }
        Ok(loss)
    }
}

impl ContinualLearner for Baseline {
    fn train_task(&mut self, data: &Dataset, task: &TaskSpec) -> Result<()> {
        let n = task.train_indices.len();
        for _ in 0..self.cfg.epochs {
            let order = permutation(n, &mut self.rngs.shuffle);
            for chunk in order.chunks(self.cfg.batch_size) {
                let idx: Vec<usize> = chunk.iter().map(|&i| task.train_indices[i]).collect();
                self.train_step(data, &idx, task.task_id)?;
            }
        }
        Ok(())
    }

    fn working(&self) -> &NetworkState {
        &self.net
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.add_network("working", &self.net);
        if let Some(m) = &self.memory {
            m.export(&mut ck);
        }
        ck
    }
}
