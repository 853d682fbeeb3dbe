//! Episodic reservoir buffer and the EMA-consolidated long-term model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::net::NetworkState;
use crate::tensor::Tensor;

/// Reservoir sampler (Vitter's algorithm R): after `seen` offers every offered
/// item is held with probability `capacity / seen`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reservoir<T> {
    capacity: usize,
    items: Vec<T>,
    seen: u64,
}

impl<T> Reservoir<T> {
    pub fn new(capacity: usize) -> Self {
        Reservoir { capacity, items: Vec::with_capacity(capacity), seen: 0 }
    }

    /// Offers one item; returns the slot it was written to, if any.
    pub fn insert<R: Rng + ?Sized>(&mut self, item: T, rng: &mut R) -> Option<usize> {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(item);
            return Some(self.items.len() - 1);
        }
        let j = rng.gen_range(0..self.seen);
        if j < self.capacity as u64 {
            self.items[j as usize] = item;
            Some(j as usize)
        } else {
            None
        }
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredItem {
    /// Raw (un-augmented) input.
    pub input: Vec<f64>,
    pub label: usize,
    /// Kept for Task-IL bookkeeping only; never used in training.
    pub task: Option<usize>,
}

/// A replay batch drawn from episodic memory.
#[derive(Debug, Clone)]
pub struct ReplayBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub slots: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodicMemory {
    item_shape: Vec<usize>,
    reservoir: Reservoir<StoredItem>,
}

impl EpisodicMemory {
    pub fn new(capacity: usize, item_shape: &[usize]) -> Self {
        EpisodicMemory { item_shape: item_shape.to_vec(), reservoir: Reservoir::new(capacity) }
    }

    pub fn insert<R: Rng + ?Sized>(&mut self, item: StoredItem, rng: &mut R) -> Result<Option<usize>> {
        let n: usize = self.item_shape.iter().product();
        if item.input.len() != n {
            return Err(Error::ShapeMismatch { expected: self.item_shape.clone(), actual: vec![item.input.len()] });
        }
        Ok(self.reservoir.insert(item, rng))
    }

    /// Uniform draw with replacement; `None` when the buffer is empty.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Option<ReplayBatch> {
        if self.reservoir.is_empty() || batch_size == 0 {
            return None;
        }
        let items = self.reservoir.items();
        let slots: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..items.len())).collect();
        let rows: Vec<&[f64]> = slots.iter().map(|&s| items[s].input.as_slice()).collect();
        let inputs = Tensor::stack_rows(&self.item_shape, &rows).expect("stored items match the buffer shape");
        let labels = slots.iter().map(|&s| items[s].label).collect();
        Some(ReplayBatch { inputs, labels, slots })
    }

    pub fn items(&self) -> &[StoredItem] {
        self.reservoir.items()
    }

    pub fn len(&self) -> usize {
        self.reservoir.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reservoir.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.reservoir.seen()
    }

    pub fn capacity(&self) -> usize {
        self.reservoir.capacity()
    }

    /// Exports the buffer as `buffer.inputs`, `buffer.labels`, `buffer.tasks`
    /// (-1 for none) and `buffer.meta` (`[capacity, seen]`).
    pub fn export(&self, ck: &mut Checkpoint) {
        let items = self.items();
        let meta = Tensor::vector(vec![self.capacity() as f64, self.seen() as f64]);
        ck.push("buffer.meta", meta);
        if items.is_empty() {
            return;
        }
        let rows: Vec<&[f64]> = items.iter().map(|i| i.input.as_slice()).collect();
        ck.push("buffer.inputs", Tensor::stack_rows(&self.item_shape, &rows).expect("consistent items"));
        ck.push("buffer.labels", Tensor::vector(items.iter().map(|i| i.label as f64).collect()));
        ck.push("buffer.tasks", Tensor::vector(items.iter().map(|i| i.task.map_or(-1.0, |t| t as f64)).collect()));
    }

    pub fn import(ck: &Checkpoint) -> Result<Self> {
        let missing = |k: &str| Error::InvalidInput(format!("checkpoint lacks {k}"));
        let meta = ck.get("buffer.meta").ok_or_else(|| missing("buffer.meta"))?;
        let [capacity, seen] = meta.data()[..] else {
            return Err(Error::InvalidInput("buffer.meta must hold [capacity, seen]".into()));
        };
        let Some(inputs) = ck.get("buffer.inputs") else {
            return Err(Error::InvalidInput("cannot restore an empty buffer without an item shape".into()));
        };
        let labels = ck.get("buffer.labels").ok_or_else(|| missing("buffer.labels"))?;
        let tasks = ck.get("buffer.tasks").ok_or_else(|| missing("buffer.tasks"))?;
        let mut mem = EpisodicMemory::new(capacity as usize, &inputs.shape()[1..]);
        for i in 0..inputs.rows() {
            let t = tasks.data()[i];
            mem.reservoir.items.push(StoredItem {
                input: inputs.row(i).to_vec(),
                label: labels.data()[i] as usize,
                task: (t >= 0.0).then_some(t as usize),
            });
        }
        mem.reservoir.seen = seen as u64;
        Ok(mem)
    }
}

/// Long-term memory update settings: decay `alpha` and update rate `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsolidationConfig {
    pub alpha: f64,
    pub rate: f64,
}

impl Default for ConsolidationConfig {
    fn default() -> Self {
        ConsolidationConfig { alpha: 0.999, rate: 0.5 }
    }
}

impl ConsolidationConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(0.0..=1.0).contains(&self.alpha) {
            errs.push(format!("ema.alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.rate) {
            errs.push(format!("ema.rate must lie in [0, 1], got {}", self.rate));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// `stable <- alpha * stable + (1 - alpha) * working` for every parameter.
pub fn ema_blend(stable: &mut NetworkState, working: &NetworkState, alpha: f64) -> Result<()> {
    stable.check_same_architecture(working)?;
    for (s, w) in stable.params_mut().zip(working.params()) {
        for (a, b) in s.data_mut().iter_mut().zip(w.data()) {
            *a = alpha * *a + (1.0 - alpha) * b;
        }
    }
    Ok(())
}

/// One stochastic consolidation step: a single `a ~ U(0, 1)` is drawn and the
/// whole model is blended when `rate > a`. Returns whether it fired.
pub fn ema_update<R: Rng + ?Sized>(
    stable: &mut NetworkState,
    working: &NetworkState,
    cfg: &ConsolidationConfig,
    rng: &mut R,
) -> Result<bool> {
    stable.check_same_architecture(working)?;
    let a: f64 = rng.gen();
    if cfg.rate > a {
        ema_blend(stable, working, cfg.alpha)?;
        Ok(true)
    } else {
        Ok(false)
    }
}
