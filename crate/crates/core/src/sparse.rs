//! Global k-winner-take-all over convolution filters.
//!
//! Each filter of an activation map is scored by the absolute sum of its map.
//! The `k` best-scoring filters survive and pass through ReLU; every other
//! filter map is set to zero. Dense layers use the same rule with every unit
//! treated as a 1x1 filter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fraction of filters kept active at a layer, in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SparsityRatio(f64);

impl SparsityRatio {
    pub const DENSE: SparsityRatio = SparsityRatio(1.0);

    pub fn new(ratio: f64) -> Result<Self> {
        if ratio > 0.0 && ratio <= 1.0 {
            Ok(SparsityRatio(ratio))
        } else {
            Err(Error::InvalidInput(format!("sparsity ratio must lie in (0, 1], got {ratio}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// Number of winners out of `filters`: `max(1, round_half_up(ratio * filters))`.
    pub fn winners(self, filters: usize) -> usize {
        let k = (self.0 * filters as f64 + 0.5).floor() as usize;
        k.clamp(1, filters.max(1))
    }
}

impl TryFrom<f64> for SparsityRatio {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        SparsityRatio::new(v)
    }
}

impl From<SparsityRatio> for f64 {
    fn from(r: SparsityRatio) -> f64 {
        r.0
    }
}

/// Absolute-sum score of each filter in a `C x H x W` map.
pub fn filter_scores(act_map: &Tensor) -> Result<Vec<f64>> {
    let channels = channel_count(act_map)?;
    Ok(scores_of(act_map.data(), channels))
}

pub(crate) fn scores_of(data: &[f64], channels: usize) -> Vec<f64> {
    let spatial = data.len() / channels;
    data.chunks_exact(spatial).map(|m| m.iter().map(|v| v.abs()).sum()).collect()
}

/// Binary mask keeping the `k` highest-scoring filters; ties at the threshold
/// go to the lower filter index.
pub fn kwta_mask(scores: &[f64], ratio: SparsityRatio) -> Vec<bool> {
    let k = ratio.winners(scores.len());
    select_top(scores, None, k)
}

/// Top-`k` selection among the candidate filters (all filters when `candidates`
/// is `None`). Returns every candidate when fewer than `k` exist.
pub(crate) fn select_top(scores: &[f64], candidates: Option<&[bool]>, k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&j| candidates.is_none_or(|c| c[j])).collect();
    // stable sort keeps ascending index order among equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut mask = vec![false; scores.len()];
    for &j in order.iter().take(k) {
        mask[j] = true;
    }
    mask
}

/// Pre-mask, k-WTA and ReLU applied to one `C x H x W` map.
///
/// Filters removed by `pre_mask` are not scored. `k` is computed over all `C`
/// filters, so a restrictive pre-mask can leave fewer than `k` survivors; all
/// of them are then kept.
pub fn apply_kwta(act_map: &Tensor, pre_mask: Option<&[bool]>, ratio: SparsityRatio) -> Result<Tensor> {
    let channels = channel_count(act_map)?;
    if let Some(m) = pre_mask {
        if m.len() != channels {
            return Err(Error::InvalidInput(format!("pre-mask has {} entries for {channels} filters", m.len())));
        }
    }
    let mut out = act_map.clone();
    let k = ratio.winners(channels);
    sparsify_in_place(out.data_mut(), channels, pre_mask, k, None);
    Ok(out)
}

/// Runs the pipeline in place over one sample and returns the kept-filter mask.
/// With `frozen`, the kept set is taken as given instead of being selected.
pub(crate) fn sparsify_in_place(
    data: &mut [f64],
    channels: usize,
    pre_mask: Option<&[bool]>,
    k: usize,
    frozen: Option<&[bool]>,
) -> Vec<bool> {
    let keep = match frozen {
        Some(f) => f.to_vec(),
        None => {
            let scores = scores_of(data, channels);
            select_top(&scores, pre_mask, k)
        }
    };
    let spatial = data.len() / channels;
    for (map, &kept) in data.chunks_exact_mut(spatial).zip(&keep) {
        if kept {
            map.iter_mut().for_each(|v| *v = v.max(0.0));
        } else {
            map.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    keep
}

fn channel_count(act_map: &Tensor) -> Result<usize> {
    match act_map.shape() {
        [c, ..] if *c >= 1 => Ok(*c),
        s => Err(Error::InvalidInput(format!("activation map needs a leading filter axis, got shape {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    /// Exhaustive oracle: best-total-score subset of size k, preferring the
    /// lexicographically smallest index set among equal totals.
    fn brute_force_top_k(scores: &[f64], k: usize) -> Vec<bool> {
        let n = scores.len();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for bits in 0u32..(1 << n) {
            if bits.count_ones() as usize != k {
                continue;
            }
            let set: Vec<usize> = (0..n).filter(|i| bits & (1 << i) != 0).collect();
            let total: f64 = set.iter().map(|&i| scores[i]).sum();
            let better = match &best {
                None => true,
                Some((t, s)) => total > *t || (total == *t && set < *s),
            };
            if better {
                best = Some((total, set));
            }
        }
        let mut mask = vec![false; n];
        for i in best.unwrap().1 {
            mask[i] = true;
        }
        mask
    }

    #[test]
    fn winners_round_half_up_and_never_zero() {
        let r = |x| SparsityRatio::new(x).unwrap();
        assert_eq!(r(0.8).winners(32), 26);
        assert_eq!(r(0.5).winners(4), 2);
        assert_eq!(r(1.0 / 3.0).winners(3), 1);
        assert_eq!(r(0.01).winners(4), 1);
        assert_eq!(r(0.25).winners(2), 1);
        assert_eq!(r(1.0).winners(7), 7);
        assert!(SparsityRatio::new(0.0).is_err());
        assert!(SparsityRatio::new(1.5).is_err());
    }

    #[test]
    fn zero_map_scores_zero() {
        let s = filter_scores(&Tensor::zeros(&[3, 2, 2])).unwrap();
        assert_eq!(s, vec![0.0; 3]);
    }

    #[test]
    fn hand_scores() {
        let s = filter_scores(&map(2, 1, 2, vec![1.0, -1.0, 2.0, 0.0])).unwrap();
        assert_eq!(s, vec![2.0, 2.0]);
    }

    #[test]
    fn full_ratio_keeps_everything() {
        assert_eq!(kwta_mask(&[0.3, 0.0, 9.0], SparsityRatio::DENSE), vec![true; 3]);
    }

    #[test]
    fn top_half_matches_exhaustive_oracle() {
        let scores = [3.0, 1.0, 2.0, 5.0];
        let expected = brute_force_top_k(&scores, 2);
        assert_eq!(expected, vec![true, false, false, true]);
        assert_eq!(kwta_mask(&scores, SparsityRatio::new(0.5).unwrap()), expected);
    }

    #[test]
    fn ties_break_by_lower_index() {
        let scores = [2.0, 2.0, 2.0];
        let expected = brute_force_top_k(&scores, 1);
        assert_eq!(expected, vec![true, false, false]);
        assert_eq!(kwta_mask(&scores, SparsityRatio::new(1.0 / 3.0).unwrap()), expected);
    }

    fn four_filter_map() -> Tensor {
        // filter scores 3, 1, 2, 5 with mixed signs
        map(4, 1, 2, vec![2.0, -1.0, 0.5, -0.5, -2.0, 0.0, 4.0, 1.0])
    }

    #[test]
    fn apply_keeps_top_filters_with_relu() {
        let out = apply_kwta(&four_filter_map(), None, SparsityRatio::new(0.5).unwrap()).unwrap();
        assert_eq!(out.data(), &[2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 4.0, 1.0]);
    }

    #[test]
    fn pre_mask_restricts_candidates() {
        let pre = [true, true, true, false];
        let out = apply_kwta(&four_filter_map(), Some(&pre), SparsityRatio::new(0.5).unwrap()).unwrap();
        // survivors among {0,1,2} by score 3,1,2: filters 0 and 2
        assert_eq!(out.data(), &[2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dense_ratio_on_nonnegative_input_is_identity() {
        let m = map(2, 2, 1, vec![0.5, 1.0, 0.0, 3.0]);
        assert_eq!(apply_kwta(&m, None, SparsityRatio::DENSE).unwrap(), m);
    }

    #[test]
    fn few_survivors_are_all_kept() {
        let m = map(4, 1, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let pre = [true, false, false, false];
        let out = apply_kwta(&m, Some(&pre), SparsityRatio::new(0.5).unwrap()).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn mismatched_pre_mask_is_rejected() {
        assert!(apply_kwta(&four_filter_map(), Some(&[true]), SparsityRatio::DENSE).is_err());
    }

    fn map_strategy() -> impl Strategy<Value = (usize, Vec<f64>)> {
        (1usize..12, 1usize..5).prop_flat_map(|(c, s)| (Just(c), proptest::collection::vec(-5.0f64..5.0, c * s)))
    }

    proptest! {
        #[test]
        fn selection_matches_oracle((c, data) in map_strategy(), ratio in 0.05f64..=1.0) {
            let ratio = SparsityRatio::new(ratio).unwrap();
            let scores = scores_of(&data, c);
            prop_assert_eq!(kwta_mask(&scores, ratio), brute_force_top_k(&scores, ratio.winners(c)));
        }

        #[test]
        fn spatial_permutation_leaves_scores_unchanged((c, data) in map_strategy()) {
            let s = data.len() / c;
            let mut rev = data.clone();
            rev.chunks_exact_mut(s).for_each(|m| m.reverse());
            let a = scores_of(&data, c);
            let b = scores_of(&rev, c);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }

        #[test]
        fn idempotent_on_nonnegative_input((c, data) in map_strategy(), ratio in 0.05f64..=1.0) {
            let ratio = SparsityRatio::new(ratio).unwrap();
            let s = data.len() / c;
            let nonneg: Vec<f64> = data.iter().map(|v| v.abs()).collect();
            let m = Tensor::new(vec![c, s, 1], nonneg).unwrap();
            let once = apply_kwta(&m, None, ratio).unwrap();
            let twice = apply_kwta(&once, None, ratio).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn scaling_keeps_the_selected_set((c, data) in map_strategy(), ratio in 0.05f64..=1.0, scale in 0.01f64..100.0) {
            let ratio = SparsityRatio::new(ratio).unwrap();
            let a = kwta_mask(&scores_of(&data, c), ratio);
            // powers of two scale exactly; other factors may perturb near-ties by one ulp
            let p2 = 2f64.powi(scale.log2().round() as i32);
            let scaled: Vec<f64> = data.iter().map(|v| v * p2).collect();
            prop_assert_eq!(a, kwta_mask(&scores_of(&scaled, c), ratio));
        }
    }
}
