//! Activity tracking with heterogeneous and semantic dropout.
//!
//! Heterogeneous retention favors rarely used units:
//! `P_h[j] = exp(-A_g[j] / max_i A_g[i] * pi_h)`.
//! Semantic retention favors the units a class already uses:
//! `P_s[c][j] = 1 - exp(-A_s[c][j] / max_i A_s[c][i] * pi_s)`.
//!
//! A sample whose class row of `P_s` has any positive entry draws a semantic
//! mask (independent Bernoulli per unit); otherwise it draws a heterogeneous
//! mask of `ceil(1.1 * %k * N)` units sampled without replacement with
//! probability proportional to `P_h`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{FilterMask, HookMasks, NetworkState};
use crate::rng::weighted_without_replacement;
use crate::sparse::SparsityRatio;
use crate::tensor::Tensor;

pub const DEFAULT_RETAIN_FACTOR: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutConfig {
    /// Heterogeneous dropout strength.
    pub pi_h: f64,
    /// Semantic dropout strength.
    pub pi_s: f64,
    /// Epochs per task before semantic probabilities are first refreshed.
    pub warmup_epochs: usize,
    /// Over-provisioning factor for the heterogeneous retain count.
    #[serde(default = "default_retain_factor")]
    pub retain_factor: f64,
    /// Skip counting during warm-up epochs instead of counting from the first step.
    #[serde(default)]
    pub defer_counting: bool,
}

fn default_retain_factor() -> f64 {
    DEFAULT_RETAIN_FACTOR
}

impl Default for DropoutConfig {
    fn default() -> Self {
        DropoutConfig {
            pi_h: 0.5,
            pi_s: 2.0,
            warmup_epochs: 1,
            retain_factor: DEFAULT_RETAIN_FACTOR,
            defer_counting: false,
        }
    }
}

impl DropoutConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.pi_h >= 0.0 && self.pi_h.is_finite()) {
            errs.push(format!("dropout.pi_h must be a non-negative number, got {}", self.pi_h));
        }
        if !(self.pi_s >= 0.0 && self.pi_s.is_finite()) {
            errs.push(format!("dropout.pi_s must be a non-negative number, got {}", self.pi_s));
        }
        if !(self.retain_factor >= 1.0 && self.retain_factor.is_finite()) {
            errs.push(format!("dropout.retain_factor must be >= 1, got {}", self.retain_factor));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// `min(n, ceil(factor * ratio * n))`, with a small tolerance so that products
/// such as `1.1 * 0.5 * 20` are not pushed up by rounding error.
pub fn retain_count(n: usize, ratio: SparsityRatio, factor: f64) -> usize {
    let x = factor * ratio.get() * n as f64;
    ((x - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Initial heterogeneous probabilities: a uniformly random subset of
/// `retain_count` units gets 1, the rest 0.
pub fn init_hetero<R: Rng + ?Sized>(n: usize, ratio: SparsityRatio, factor: f64, rng: &mut R) -> Vec<f64> {
    let keep = retain_count(n, ratio, factor);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut p = vec![0.0; n];
    for &j in &idx[..keep] {
        p[j] = 1.0;
    }
    p
}

pub fn update_hetero(global: &[u64], pi_h: f64) -> Result<Vec<f64>> {
    if pi_h.is_nan() || pi_h < 0.0 {
        return Err(Error::Config(vec![format!("pi_h must be non-negative, got {pi_h}")]));
    }
    let max = global.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Ok(vec![1.0; global.len()]);
    }
    Ok(global.iter().map(|&a| (-(a as f64) / max as f64 * pi_h).exp()).collect())
}

/// Semantic probabilities per class row; all-zero count rows stay all zero
/// (unavailable).
pub fn update_semantic(class_wise: &[Vec<u64>], pi_s: f64) -> Result<Vec<Vec<f64>>> {
    if pi_s.is_nan() || pi_s < 0.0 {
        return Err(Error::Config(vec![format!("pi_s must be non-negative, got {pi_s}")]));
    }
    Ok(class_wise
        .iter()
        .map(|row| {
            let max = row.iter().copied().max().unwrap_or(0);
            if max == 0 {
                vec![0.0; row.len()]
            } else {
                row.iter().map(|&a| 1.0 - (-(a as f64) / max as f64 * pi_s).exp()).collect()
            }
        })
        .collect())
}

/// Samples the heterogeneous retention mask. When fewer units carry positive
/// probability than the retain count, all of them are kept and the mask is
/// short.
pub fn hetero_mask<R: Rng + ?Sized>(p_h: &[f64], ratio: SparsityRatio, factor: f64, rng: &mut R) -> Result<FilterMask> {
    if !p_h.iter().any(|&p| p > 0.0) {
        return Err(Error::ZeroProbabilities);
    }
    let count = retain_count(p_h.len(), ratio, factor);
    let mut mask = vec![false; p_h.len()];
    for j in weighted_without_replacement(p_h, count, rng) {
        mask[j] = true;
    }
    Ok(mask)
}

pub fn row_available(row: &[f64]) -> bool {
    row.iter().any(|&p| p > 0.0)
}

/// Keeps each unit independently with its probability.
pub fn semantic_mask<R: Rng + ?Sized>(row: &[f64], class: usize, rng: &mut R) -> Result<FilterMask> {
    if !row_available(row) {
        return Err(Error::UnavailableRow { class });
    }
    // u in (0, 1]: probability 0 is never kept, probability 1 always is
    Ok(row.iter().map(|&p| 1.0 - rng.gen::<f64>() <= p).collect())
}

/// Counters and probabilities of one dropout-enabled layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerActivity {
    /// Hook ordinal within the network.
    pub hook: usize,
    /// Layer index within the network.
    pub layer: usize,
    pub ratio: SparsityRatio,
    /// `A_g`: per-unit activation counts.
    pub global: Vec<u64>,
    /// `A_s`: per-class, per-unit activation counts.
    pub class_wise: Vec<Vec<u64>>,
    /// `P_h`
    pub hetero: Vec<f64>,
    /// `P_s`
    pub semantic: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityState {
    pub config: DropoutConfig,
    pub hook_count: usize,
    pub layers: Vec<LayerActivity>,
}

impl ActivityState {
    /// Tracks every dropout-enabled hook of `net`, with heterogeneous
    /// probabilities initialized to a random retained subset.
    pub fn new<R: Rng + ?Sized>(net: &NetworkState, config: DropoutConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let classes = net.class_count();
        let hooks = net.hooks();
        let layers = hooks
            .iter()
            .enumerate()
            .filter(|(_, h)| h.config.dropout)
            .map(|(ord, h)| LayerActivity {
                hook: ord,
                layer: h.layer,
                ratio: h.config.ratio,
                global: vec![0; h.filters],
                class_wise: vec![vec![0; h.filters]; classes],
                hetero: init_hetero(h.filters, h.config.ratio, config.retain_factor, rng),
                semantic: vec![vec![0.0; h.filters]; classes],
            })
            .collect();
        Ok(ActivityState { config, hook_count: hooks.len(), layers })
    }

    /// Fresh counters over the same layers, for side analyses that must not
    /// touch the training counters.
    pub fn empty_like(&self) -> Self {
        let mut s = self.clone();
        for l in &mut s.layers {
            l.global.iter_mut().for_each(|v| *v = 0);
            l.class_wise.iter_mut().flatten().for_each(|v| *v = 0);
        }
        s
    }

    /// Semantic mask when the class row is available, heterogeneous otherwise.
    pub fn select_mask<R: Rng + ?Sized>(&self, slot: usize, label: usize, rng: &mut R) -> Result<FilterMask> {
        let l = &self.layers[slot];
        let row = l.semantic.get(label).ok_or(Error::LabelOutOfRange { label, classes: l.semantic.len() })?;
        if row_available(row) {
            semantic_mask(row, label, rng)
        } else {
            hetero_mask(&l.hetero, l.ratio, self.config.retain_factor, rng)
        }
    }

    /// Per-sample masks for a labeled batch, one entry per network hook.
    pub fn batch_masks<R: Rng + ?Sized>(&self, labels: &[usize], rng: &mut R) -> Result<HookMasks> {
        let mut masks = HookMasks::empty(self.hook_count);
        for (slot, l) in self.layers.iter().enumerate() {
            let per_sample = labels.iter().map(|&y| self.select_mask(slot, y, rng)).collect::<Result<Vec<_>>>()?;
            masks.per_hook[l.hook] = Some(per_sample);
        }
        Ok(masks)
    }

    /// Counts every unit with a nonzero post-pipeline score once.
    pub fn record_activity(&mut self, slot: usize, scores: &[f64], label: usize, enabled: bool) {
        if !enabled {
            return;
        }
        let l = &mut self.layers[slot];
        for (j, &s) in scores.iter().enumerate() {
            if s != 0.0 {
                l.global[j] += 1;
                l.class_wise[label][j] += 1;
            }
        }
    }

    /// Records a batch from a forward pass's activation record; `enabled[i]`
    /// gates sample `i`.
    pub fn record_batch(&mut self, record: &[Tensor], labels: &[usize], enabled: &[bool]) {
        for slot in 0..self.layers.len() {
            let scores = &record[self.layers[slot].hook];
            for (i, (&y, &on)) in labels.iter().zip(enabled).enumerate() {
                self.record_activity(slot, scores.row(i), y, on);
            }
        }
    }

    pub fn refresh_semantic(&mut self) -> Result<()> {
        for l in &mut self.layers {
            l.semantic = update_semantic(&l.class_wise, self.config.pi_s)?;
        }
        Ok(())
    }

    pub fn refresh_hetero(&mut self) -> Result<()> {
        for l in &mut self.layers {
            l.hetero = update_hetero(&l.global, self.config.pi_h)?;
        }
        Ok(())
    }

    pub fn total_counts(&self) -> u64 {
        self.layers.iter().map(|l| l.global.iter().sum::<u64>()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{small_conv, NetworkState};
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    fn r(x: f64) -> SparsityRatio {
        SparsityRatio::new(x).unwrap()
    }

    #[test]
    fn init_clamps_at_full_ratio() {
        let mut rng = stream(0, Stream::Dropout);
        assert_eq!(init_hetero(7, r(1.0), 1.1, &mut rng), vec![1.0; 7]);
    }

    #[test]
    fn init_retains_ceil_of_scaled_count() {
        // ceil(1.1 * 0.8 * 10) = ceil(8.8) = 9
        let mut rng = stream(0, Stream::Dropout);
        let p = init_hetero(10, r(0.8), 1.1, &mut rng);
        assert_eq!(p.iter().filter(|&&v| v == 1.0).count(), 9);
        assert_eq!(p.iter().filter(|&&v| v == 0.0).count(), 1);
        assert_eq!(retain_count(20, r(0.5), 1.1), 11);
        assert_eq!(retain_count(32, r(0.8), 1.1), 29);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = init_hetero(32, r(0.5), 1.1, &mut stream(3, Stream::Dropout));
        let b = init_hetero(32, r(0.5), 1.1, &mut stream(3, Stream::Dropout));
        assert_eq!(a, b);
    }

    #[test]
    fn hetero_degenerate_cases() {
        assert_eq!(update_hetero(&[0, 0, 0], 0.5).unwrap(), vec![1.0; 3]);
        assert_eq!(update_hetero(&[4, 1, 9], 0.0).unwrap(), vec![1.0; 3]);
        assert!(update_hetero(&[1], -0.1).is_err());
    }

    #[test]
    fn hetero_most_active_unit() {
        let p = update_hetero(&[3, 10, 0], 0.5).unwrap();
        assert!((p[1] - 0.606_530_659_712_633_4).abs() < 1e-15);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn semantic_row_max_values() {
        let p = update_semantic(&[vec![5, 0, 2], vec![0, 0, 0]], 2.0).unwrap();
        assert!((p[0][0] - 0.864_664_716_763_387_3).abs() < 1e-15);
        assert_eq!(p[0][1], 0.0);
        assert_eq!(p[1], vec![0.0; 3]);
        let p = update_semantic(&[vec![1, 7]], 3.0).unwrap();
        assert!((p[0][1] - 0.950_212_931_632_136).abs() < 1e-15);
        assert!(update_semantic(&[vec![1]], -1.0).is_err());
    }

    #[test]
    fn hetero_mask_forced_cases() {
        let mut rng = stream(1, Stream::Dropout);
        // one-hot probabilities with a single retained unit
        let m = hetero_mask(&[0.0, 1.0, 0.0, 0.0], r(0.25), 1.0, &mut rng).unwrap();
        assert_eq!(m, vec![false, true, false, false]);
        let m = hetero_mask(&[1.0, 1.0, 0.0, 0.0], r(0.5), 1.0, &mut rng).unwrap();
        assert_eq!(m, vec![true, true, false, false]);
        assert!(matches!(hetero_mask(&[0.0; 3], r(0.5), 1.1, &mut rng), Err(Error::ZeroProbabilities)));
    }

    #[test]
    fn short_mask_when_too_few_positive_units() {
        let mut rng = stream(2, Stream::Dropout);
        let m = hetero_mask(&[0.3, 0.0, 0.0, 0.0], r(1.0), 1.1, &mut rng).unwrap();
        assert_eq!(m, vec![true, false, false, false]);
    }

    #[test]
    fn semantic_mask_contract() {
        let mut rng = stream(3, Stream::Dropout);
        assert_eq!(semantic_mask(&[1.0; 5], 0, &mut rng).unwrap(), vec![true; 5]);
        assert!(matches!(semantic_mask(&[0.0; 5], 4, &mut rng), Err(Error::UnavailableRow { class: 4 })));
        for _ in 0..1000 {
            let m = semantic_mask(&[0.0, 1.0, 0.5], 0, &mut rng).unwrap();
            assert!(!m[0] && m[1]);
        }
    }

    fn state() -> (NetworkState, ActivityState) {
        let specs = small_conv((4, 8), 6, 3, Some((r(0.9), r(0.5))), true);
        let net = NetworkState::build(&[1, 10, 10], &specs, 3, &mut stream(0, Stream::Init)).unwrap();
        let act = ActivityState::new(&net, DropoutConfig::default(), &mut stream(0, Stream::Dropout)).unwrap();
        (net, act)
    }

    #[test]
    fn only_dropout_enabled_hooks_are_tracked() {
        let (net, act) = state();
        assert_eq!(act.hook_count, 2);
        assert_eq!(act.layers.len(), 1);
        assert_eq!(act.layers[0].hook, 1);
        assert_eq!(act.layers[0].layer, net.hooks()[1].layer);
    }

    #[test]
    fn select_mask_paths() {
        let (_, mut act) = state();
        let mut rng = stream(4, Stream::Dropout);
        // fresh class: heterogeneous path retains exactly ceil(1.1 * 0.5 * 8) = 5 units
        let m = act.select_mask(0, 1, &mut rng).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 5);
        for (keep, p) in m.iter().zip(&act.layers[0].hetero) {
            assert!(!keep || *p > 0.0);
        }
        // populated class row: semantic path
        act.layers[0].semantic[1] = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let m = act.select_mask(0, 1, &mut rng).unwrap();
        assert_eq!(m, vec![true, false, false, false, false, false, false, true]);
        // determinism
        let a = act.select_mask(0, 2, &mut stream(9, Stream::Dropout)).unwrap();
        let b = act.select_mask(0, 2, &mut stream(9, Stream::Dropout)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recording_counts_active_units() {
        let (_, mut act) = state();
        let before = act.clone();
        act.record_activity(0, &[1.0, 0.0, 0.0, 2.5, 0.0, 0.0, 0.0, 0.0], 2, false);
        assert_eq!(act, before);
        act.record_activity(0, &[1.0, 0.0, 0.0, 2.5, 0.0, 0.0, 0.0, 0.0], 2, true);
        assert_eq!(act.layers[0].global, vec![1, 0, 0, 1, 0, 0, 0, 0]);
        assert_eq!(act.layers[0].class_wise[2], vec![1, 0, 0, 1, 0, 0, 0, 0]);
        assert_eq!(act.layers[0].class_wise[0], vec![0; 8]);

        let record = vec![
            Tensor::zeros(&[3, 4]),
            Tensor::new(vec![3, 8], [[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]; 3].concat()).unwrap(),
        ];
        act.record_batch(&record, &[0, 1, 1], &[true, true, true]);
        assert_eq!(act.layers[0].global[0], 4);
    }

    #[test]
    fn json_round_trip() {
        let (_, act) = state();
        assert_eq!(ActivityState::from_json(&act.to_json().unwrap()).unwrap(), act);
    }

    proptest! {
        #[test]
        fn probabilities_in_unit_interval_and_monotone(
            counts in proptest::collection::vec(0u64..1000, 1..20),
            pi in 0.0f64..10.0,
        ) {
            let ph = update_hetero(&counts, pi).unwrap();
            let ps = update_semantic(std::slice::from_ref(&counts), pi).unwrap().remove(0);
            for i in 0..counts.len() {
                prop_assert!((0.0..=1.0).contains(&ph[i]));
                prop_assert!((0.0..=1.0).contains(&ps[i]));
                for j in 0..counts.len() {
                    if counts[i] > counts[j] {
                        prop_assert!(ph[i] <= ph[j]);
                        prop_assert!(ps[i] >= ps[j]);
                    }
                }
            }
        }

        #[test]
        fn column_sums_match_global_counts(
            events in proptest::collection::vec((0usize..3, proptest::collection::vec(0.0f64..2.0, 8)), 0..40),
        ) {
            let (_, mut act) = state();
            for (y, scores) in &events {
                let s: Vec<f64> = scores.iter().map(|v| if *v < 1.0 { 0.0 } else { *v }).collect();
                act.record_activity(0, &s, *y, true);
            }
            let l = &act.layers[0];
            for j in 0..8 {
                prop_assert_eq!(l.global[j], l.class_wise.iter().map(|r| r[j]).sum::<u64>());
            }
        }
    }
}
