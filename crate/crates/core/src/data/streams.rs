use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DataSplit;
use crate::error::{Error, Result};
use crate::rng::{permutation, stream, weighted_without_replacement, Stream};

/// One task of a continual-learning stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    /// Classes present in the task, ascending.
    pub classes: Vec<usize>,
    /// `(class, training samples)` for every class in the task.
    pub class_counts: Vec<(usize, usize)>,
    /// Indices into the training partition.
    pub train_indices: Vec<usize>,
    /// Indices into the test partition (items of the task's classes).
    pub test_indices: Vec<usize>,
}

impl TaskSpec {
    fn from_allocation(task_id: usize, split: &DataSplit, mut picks: Vec<(usize, Vec<usize>)>) -> Self {
        picks.sort_by_key(|(c, _)| *c);
        let classes: Vec<usize> = picks.iter().map(|(c, _)| *c).collect();
        let class_counts = picks.iter().map(|(c, idx)| (*c, idx.len())).collect();
        let mut train_indices: Vec<usize> = picks.into_iter().flat_map(|(_, idx)| idx).collect();
        train_indices.sort_unstable();
        let test_indices =
            (0..split.test.len()).filter(|&i| classes.binary_search(&split.test.labels()[i]).is_ok()).collect();
        TaskSpec { task_id, classes, class_counts, train_indices, test_indices }
    }
}

/// Class-IL split: task `t` holds classes `[t*C/n, (t+1)*C/n)` with all of
/// their training items.
pub fn split_stream(split: &DataSplit, n_tasks: usize) -> Result<Vec<TaskSpec>> {
    let classes = split.class_count();
    if n_tasks == 0 || !classes.is_multiple_of(n_tasks) {
        return Err(Error::Config(vec![format!("{classes} classes cannot be split evenly into {n_tasks} tasks")]));
    }
    let per = classes / n_tasks;
    let by_class = split.train.class_index();
    Ok((0..n_tasks)
        .map(|t| {
            let picks = (t * per..(t + 1) * per).map(|c| (c, by_class[c].clone())).collect();
            TaskSpec::from_allocation(t, split, picks)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcilWeighting {
    Unif,
    Longtail,
}

/// Zipf(s = 1) weight of each class id: `1 / (c + 1)`.
pub fn zipf_weights(classes: usize) -> Vec<f64> {
    (0..classes).map(|c| 1.0 / (c as f64 + 1.0)).collect()
}

/// Generalized Class-IL stream. Per task: a class count uniform in
/// `[2, max_classes]`, classes drawn without replacement (uniformly, or by
/// Zipf weight for `Longtail`), and `samples_per_task` training items split
/// across them (equal shares, or Zipf-proportional) with each class capped at
/// its available items.
pub fn gcil_stream(
    split: &DataSplit,
    n_tasks: usize,
    samples_per_task: usize,
    max_classes: usize,
    weighting: GcilWeighting,
    seed: u64,
) -> Result<Vec<TaskSpec>> {
    let classes = split.class_count();
    let mut errs = Vec::new();
    if n_tasks == 0 {
        errs.push("gcil needs at least one task".to_string());
    }
    if max_classes < 2 || max_classes > classes {
        errs.push(format!("gcil max_classes must lie in [2, {classes}], got {max_classes}"));
    }
    if samples_per_task == 0 || samples_per_task > split.train.len() {
        errs.push(format!("gcil samples_per_task must lie in [1, {}], got {samples_per_task}", split.train.len()));
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }

    let by_class = split.train.class_index();
    let class_weights = match weighting {
        GcilWeighting::Unif => vec![1.0; classes],
        GcilWeighting::Longtail => zipf_weights(classes),
    };
    let mut rng = stream(seed, Stream::Data);
    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let k = rng.gen_range(2..=max_classes);
        let mut chosen = weighted_without_replacement(&class_weights, k, &mut rng);
        chosen.sort_unstable();
        let weights: Vec<f64> = chosen.iter().map(|&c| class_weights[c]).collect();
        let caps: Vec<usize> = chosen.iter().map(|&c| by_class[c].len()).collect();
        let counts = allocate(samples_per_task, &weights, &caps).map_err(|e| match e {
            Error::InfeasibleBudget(m) => Error::InfeasibleBudget(format!("task {t}: {m}")),
            other => other,
        })?;
        let picks = chosen
            .iter()
            .zip(&counts)
            .map(|(&c, &n)| {
                let order = permutation(by_class[c].len(), &mut rng);
                (c, order[..n].iter().map(|&i| by_class[c][i]).collect())
            })
            .collect();
        tasks.push(TaskSpec::from_allocation(t, split, picks));
    }
    Ok(tasks)
}

/// Splits `budget` proportionally to `weights` (largest remainder, ties to the
/// lower position), capping each entry at `caps` and re-spreading overflow
/// over the uncapped entries.
pub(crate) fn allocate(budget: usize, weights: &[f64], caps: &[usize]) -> Result<Vec<usize>> {
    let total_cap: usize = caps.iter().sum();
    if total_cap < budget {
        return Err(Error::InfeasibleBudget(format!(
            "{budget} samples requested but the chosen classes hold only {total_cap}"
        )));
    }
    let n = weights.len();
    let mut alloc = vec![0usize; n];
    let mut capped = vec![false; n];
    let mut remaining = budget;
    loop {
        let active: Vec<usize> = (0..n).filter(|&i| !capped[i]).collect();
        let shares = largest_remainder(remaining, &active.iter().map(|&i| weights[i]).collect::<Vec<_>>());
        let over: Vec<usize> = active.iter().zip(&shares).filter(|(&i, &s)| s >= caps[i]).map(|(&i, _)| i).collect();
        if over.is_empty() {
            for (&i, s) in active.iter().zip(shares) {
                alloc[i] = s;
            }
            return Ok(alloc);
        }
        for i in over {
            capped[i] = true;
            alloc[i] = caps[i];
            remaining -= caps[i];
        }
        if remaining == 0 {
            return Ok(alloc);
        }
    }
}

fn largest_remainder(budget: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| budget as f64 * w / total).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let left = budget - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa)
    });
    for &i in order.iter().take(left) {
        out[i] += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gaussian_blobs;

    fn blobs(classes: usize, per: usize) -> DataSplit {
        gaussian_blobs(classes, per, 3, &[1, 2, 2], 0.1, &mut stream(0, Stream::Data)).unwrap()
    }

    #[test]
    fn split_assigns_consecutive_class_pairs() {
        let tasks = split_stream(&blobs(10, 4), 5).unwrap();
        assert_eq!(tasks[0].classes, vec![0, 1]);
        assert_eq!(tasks[4].classes, vec![8, 9]);
        assert_eq!(tasks[0].train_indices.len(), 8);
        assert_eq!(tasks[0].test_indices.len(), 6);
        let singles = split_stream(&blobs(10, 4), 10).unwrap();
        assert!(singles.iter().enumerate().all(|(t, s)| s.classes == vec![t]));
    }

    #[test]
    fn split_partitions_the_label_space() {
        let split = blobs(6, 3);
        let tasks = split_stream(&split, 3).unwrap();
        let mut all: Vec<usize> = tasks.iter().flat_map(|t| t.classes.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        let mut idx: Vec<usize> = tasks.iter().flat_map(|t| t.train_indices.clone()).collect();
        idx.sort_unstable();
        assert_eq!(idx, (0..split.train.len()).collect::<Vec<_>>());
    }

    #[test]
    fn uneven_split_is_rejected() {
        assert!(matches!(split_stream(&blobs(10, 2), 3), Err(Error::Config(_))));
    }

    #[test]
    fn single_unif_task_spreads_budget_evenly() {
        let split = blobs(10, 50);
        let tasks = gcil_stream(&split, 1, 103, 10, GcilWeighting::Unif, 1993).unwrap();
        let counts: Vec<usize> = tasks[0].class_counts.iter().map(|(_, n)| *n).collect();
        assert_eq!(counts.iter().sum::<usize>(), 103);
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
    }

    #[test]
    fn gcil_is_seed_deterministic() {
        let split = blobs(10, 40);
        let a = gcil_stream(&split, 6, 50, 5, GcilWeighting::Longtail, 7).unwrap();
        let b = gcil_stream(&split, 6, 50, 5, GcilWeighting::Longtail, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gcil_stream(&split, 6, 50, 5, GcilWeighting::Longtail, 8).unwrap());
    }

    #[test]
    fn allocation_caps_and_redistributes() {
        assert_eq!(allocate(10, &[1.0, 1.0], &[2, 100]).unwrap(), vec![2, 8]);
        assert_eq!(allocate(7, &[1.0, 1.0, 1.0], &[10, 10, 10]).unwrap(), vec![3, 2, 2]);
        assert!(matches!(allocate(10, &[1.0], &[9]), Err(Error::InfeasibleBudget(_))));
    }

    #[test]
    fn infeasible_task_budget_faults() {
        let split = blobs(4, 5);
        // two classes of five items each cannot hold 15 samples
        let r = gcil_stream(&split, 20, 15, 2, GcilWeighting::Unif, 0);
        assert!(matches!(r, Err(Error::InfeasibleBudget(_))));
    }

    #[test]
    fn invalid_gcil_config_is_itemized() {
        let split = blobs(4, 5);
        match gcil_stream(&split, 0, 0, 9, GcilWeighting::Unif, 0) {
            Err(Error::Config(items)) => assert_eq!(items.len(), 3),
            other => panic!("{other:?}"),
        }
    }
}
