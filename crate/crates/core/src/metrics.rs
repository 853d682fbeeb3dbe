//! Evaluation readouts: Class-IL and Task-IL accuracy, the task accuracy
//! matrix, per-task prediction mass (recency bias), class similarity of
//! activation counts, and paired working/long-term accuracies.
//!
//! Every function here reads a model snapshot and never mutates it.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TaskSpec};
use crate::dropout::ActivityState;
use crate::error::{Error, Result};
use crate::net::{softmax, ForwardOptions, NetworkState};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 256;

/// Eval-mode logits (k-WTA on, no dropout) for the selected items.
pub fn predict_logits(net: &NetworkState, data: &Dataset, indices: &[usize]) -> Result<Tensor> {
    if indices.is_empty() {
        return Err(Error::InvalidInput("no items to predict".into()));
    }
    let mut out = Vec::with_capacity(indices.len() * net.class_count());
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk);
        out.extend(net.forward(&x, ForwardOptions::eval())?.logits.into_data());
    }
    Tensor::new(vec![indices.len(), net.class_count()], out)
}

fn argmax_over(row: &[f64], columns: impl Iterator<Item = usize>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for c in columns {
        if best.is_none_or(|(_, v)| row[c] > v) {
            best = Some((c, row[c]));
        }
    }
    best.map(|(c, _)| c)
}

/// Fraction of rows whose argmax over all columns equals the label.
pub fn class_il_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let n = labels.len();
    if n == 0 {
        return 0.0;
    }
    let hits = (0..n).filter(|&i| argmax_over(logits.row(i), 0..logits.row_len()) == Some(labels[i])).count();
    hits as f64 / n as f64
}

/// Fraction of rows whose argmax over the `classes` columns equals the label.
pub fn task_il_accuracy(logits: &Tensor, labels: &[usize], classes: &[usize]) -> f64 {
    let n = labels.len();
    if n == 0 {
        return 0.0;
    }
    let hits = (0..n).filter(|&i| argmax_over(logits.row(i), classes.iter().copied()) == Some(labels[i])).count();
    hits as f64 / n as f64
}

/// Per-task accuracies of one model over a prefix of the stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracies {
    pub class_il: Vec<f64>,
    pub task_il: Vec<f64>,
    /// Test items per task, for weighting means.
    pub counts: Vec<usize>,
}

impl TaskAccuracies {
    pub fn mean_class_il(&self) -> f64 {
        mean(&self.class_il)
    }

    pub fn mean_task_il(&self) -> f64 {
        mean(&self.task_il)
    }

    /// Accuracy over the pooled test items of all evaluated tasks.
    pub fn pooled_class_il(&self) -> f64 {
        let total: usize = self.counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        self.class_il.iter().zip(&self.counts).map(|(a, &n)| a * n as f64).sum::<f64>() / total as f64
    }
}

/// Class-IL and Task-IL accuracy on the test items of each task in `tasks`.
pub fn evaluate(net: &NetworkState, test: &Dataset, tasks: &[TaskSpec]) -> Result<TaskAccuracies> {
    let mut out = TaskAccuracies { class_il: Vec::new(), task_il: Vec::new(), counts: Vec::new() };
    for task in tasks {
        if task.test_indices.is_empty() {
            out.class_il.push(0.0);
            out.task_il.push(0.0);
            out.counts.push(0);
            continue;
        }
        let logits = predict_logits(net, test, &task.test_indices)?;
        let labels: Vec<usize> = task.test_indices.iter().map(|&i| test.labels()[i]).collect();
        out.class_il.push(class_il_accuracy(&logits, &labels));
        out.task_il.push(task_il_accuracy(&logits, &labels, &task.classes));
        out.counts.push(labels.len());
    }
    Ok(out)
}

/// Lower-triangular accuracy matrix: row `i` is the evaluation after
/// training task `i`, column `j` the test set of task `j`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMatrix {
    pub rows: Vec<Vec<Option<f64>>>,
}

impl TaskMatrix {
    pub fn new(tasks: usize) -> Self {
        TaskMatrix { rows: vec![vec![None; tasks]; tasks] }
    }

    pub fn set_row(&mut self, after_task: usize, accuracies: &[f64]) {
        for (j, &a) in accuracies.iter().enumerate() {
            self.rows[after_task][j] = Some(a);
        }
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied().flatten()
    }

    pub fn diagonal(&self) -> Vec<Option<f64>> {
        (0..self.rows.len()).map(|i| self.get(i, i)).collect()
    }

    /// Final accuracy minus just-learned accuracy, per task (negative means
    /// forgetting).
    pub fn stability(&self) -> Vec<Option<f64>> {
        let last = self.rows.len().saturating_sub(1);
        (0..self.rows.len()).map(|j| Some(self.get(last, j)? - self.get(j, j)?)).collect()
    }

    /// Mean over earlier tasks of the largest drop from any previous
    /// evaluation to the final one.
    pub fn forgetting(&self) -> Option<f64> {
        let t = self.rows.len();
        if t < 2 {
            return None;
        }
        let last = t - 1;
        let drops: Vec<f64> = (0..last)
            .filter_map(|j| {
                let best = (j..last).filter_map(|i| self.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
                Some(best - self.get(last, j)?).filter(|d| d.is_finite())
            })
            .collect();
        (!drops.is_empty()).then(|| mean(&drops))
    }

    /// Tab-separated text, `-` for unpopulated entries.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("after_task");
        for j in 0..self.rows.len() {
            s.push_str(&format!("\ttask_{j}"));
        }
        s.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            s.push_str(&i.to_string());
            for v in row {
                match v {
                    Some(a) => s.push_str(&format!("\t{a:.6}")),
                    None => s.push_str("\t-"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Softmax mass summed within each task's class block and averaged over
/// the pooled test items of `tasks`.
pub fn recency_probabilities(net: &NetworkState, test: &Dataset, tasks: &[TaskSpec]) -> Result<Vec<f64>> {
    let mut indices: Vec<usize> = tasks.iter().flat_map(|t| t.test_indices.iter().copied()).collect();
    indices.sort_unstable();
    indices.dedup();
    if indices.is_empty() {
        return Ok(vec![0.0; tasks.len()]);
    }
    let logits = predict_logits(net, test, &indices)?;
    Ok(task_mass(&logits, tasks))
}

/// Per-task mean softmax mass of precomputed logits.
pub fn task_mass(logits: &Tensor, tasks: &[TaskSpec]) -> Vec<f64> {
    let probs = softmax(logits);
    let n = probs.rows();
    let mut mass = vec![0.0; tasks.len()];
    if n == 0 {
        return mass;
    }
    for i in 0..n {
        let row = probs.row(i);
        for (m, t) in mass.iter_mut().zip(tasks) {
            *m += t.classes.iter().map(|&c| row[c]).sum::<f64>();
        }
    }
    mass.iter_mut().for_each(|m| *m /= n as f64);
    mass
}

/// Cosine similarity between class rows of an activation-count matrix. Zero
/// rows have similarity 0 with everything, including themselves.
pub fn activation_similarity(counts: &[Vec<u64>]) -> Vec<Vec<f64>> {
    let norms: Vec<f64> = counts.iter().map(|r| r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()).collect();
    counts
        .iter()
        .enumerate()
        .map(|(a, ra)| {
            counts
                .iter()
                .enumerate()
                .map(|(b, rb)| {
                    if norms[a] == 0.0 || norms[b] == 0.0 {
                        return 0.0;
                    }
                    if a == b {
                        return 1.0;
                    }
                    let dot: f64 = ra.iter().zip(rb).map(|(&x, &y)| x as f64 * y as f64).sum();
                    (dot / (norms[a] * norms[b])).clamp(0.0, 1.0)
                })
                .collect()
        })
        .collect()
}

/// Test-set activity counts collected in a separate eval pass (k-WTA only)
/// on fresh counters shaped like `template`.
pub fn eval_activity(
    net: &NetworkState,
    template: &ActivityState,
    test: &Dataset,
    indices: &[usize],
) -> Result<ActivityState> {
    let mut counts = template.empty_like();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = test.batch(chunk);
        let fwd = net.forward(&x, ForwardOptions::eval())?;
        counts.record_batch(&fwd.activation_record, &labels, &vec![true; labels.len()]);
    }
    Ok(counts)
}

/// Working and long-term accuracies on the same tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualMemoryReport {
    pub working: TaskAccuracies,
    pub stable: TaskAccuracies,
}

pub fn dual_memory_report(
    working: &NetworkState,
    stable: &NetworkState,
    test: &Dataset,
    tasks: &[TaskSpec],
) -> Result<DualMemoryReport> {
    working.check_same_architecture(stable)?;
    Ok(DualMemoryReport { working: evaluate(working, test, tasks)?, stable: evaluate(stable, test, tasks)? })
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Sample standard deviation (n - 1); 0 for fewer than two values.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Population standard deviation, used for the spread of per-task masses.
pub fn spread(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidInput("spearman needs two equal-length series of at least 2".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: usize, classes: Vec<usize>) -> TaskSpec {
        TaskSpec { task_id: id, classes, class_counts: vec![], train_indices: vec![], test_indices: vec![] }
    }

    #[test]
    fn task_il_dominates_and_can_fix_cross_task_errors() {
        // two tasks {0,1} and {2,3}; every row's global argmax is in the other task
        let logits = Tensor::new(vec![2, 4], vec![0.5, 0.1, 0.0, 0.9, 0.0, 0.9, 0.2, 0.1]).unwrap();
        let labels = [0, 2];
        assert_eq!(class_il_accuracy(&logits, &labels), 0.0);
        assert_eq!(task_il_accuracy(&logits.slice_rows(0, 1).unwrap(), &labels[..1], &[0, 1]), 1.0);
        assert_eq!(task_il_accuracy(&logits.slice_rows(1, 2).unwrap(), &labels[1..], &[2, 3]), 1.0);
    }

    #[test]
    fn uniform_logits_give_equal_task_mass() {
        let logits = Tensor::zeros(&[5, 6]);
        let tasks = [spec(0, vec![0, 1]), spec(1, vec![2, 3]), spec(2, vec![4, 5])];
        let m = task_mass(&logits, &tasks);
        for v in &m {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn last_task_bias_shows_in_last_entry() {
        let logits = Tensor::new(vec![2, 4], vec![0.0, 0.0, 3.0, 2.0, 1.0, 0.0, 2.5, 0.0]).unwrap();
        let m = task_mass(&logits, &[spec(0, vec![0, 1]), spec(1, vec![2, 3])]);
        assert!(m[1] > m[0]);
    }

    #[test]
    fn similarity_oracle() {
        let counts = vec![vec![1, 2, 0], vec![2, 4, 0], vec![0, 0, 5], vec![3, 0, 4]];
        let s = activation_similarity(&counts);
        assert!((s[0][1] - 1.0).abs() < 1e-12);
        assert_eq!(s[0][2], 0.0);
        let oracle = 3.0 / (5f64.sqrt() * 5.0);
        assert!((s[0][3] - oracle).abs() < 1e-12);
        assert!((s[2][3] - 0.8).abs() < 1e-12);
        for (a, row) in s.iter().enumerate() {
            assert_eq!(row[a], 1.0);
            for (b, v) in row.iter().enumerate() {
                assert_eq!(*v, s[b][a]);
            }
        }
    }

    #[test]
    fn matrix_occupancy_and_readouts() {
        let mut m = TaskMatrix::new(3);
        m.set_row(0, &[0.9]);
        m.set_row(1, &[0.6, 0.95]);
        m.set_row(2, &[0.5, 0.7, 0.99]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j).is_some(), j <= i);
            }
        }
        assert_eq!(m.diagonal(), vec![Some(0.9), Some(0.95), Some(0.99)]);
        let st = m.stability();
        assert!((st[0].unwrap() + 0.4).abs() < 1e-12);
        assert!((m.forgetting().unwrap() - (0.4 + 0.25) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn pooled_accuracy_is_weighted_mean() {
        let acc = TaskAccuracies { class_il: vec![1.0, 0.5], task_il: vec![1.0, 1.0], counts: vec![1, 3] };
        assert!((acc.pooled_class_il() - 2.5 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn spearman_of_reversed_ranks() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[9.0, 5.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn std_of_constant_is_zero() {
        assert_eq!(std_dev(&[0.3, 0.3, 0.3]), 0.0);
        assert!((std_dev(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-15);
    }
}
