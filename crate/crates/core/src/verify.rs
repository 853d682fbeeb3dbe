//! Fast self-check suite: formula oracles, sparsity exactness, sampling
//! statistics, gradient checks and checkpoint round trips, each under a
//! stable identifier.
//!
//! The formulas under test are passed in as a [`Formulas`] table so that a
//! deliberately broken implementation can be checked to fail by name.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::checkpoint::Checkpoint;
use crate::dropout::{retain_count, update_hetero, update_semantic};
use crate::error::Result;
use crate::gradcheck::check_network;
use crate::memory::{ema_blend, EpisodicMemory, Reservoir, StoredItem};
use crate::net::{Activation, HookConfig, Layer, LayerSpec, NetworkState};
use crate::rng::{stream, EngineRng, Stream};
use crate::sparse::{apply_kwta, kwta_mask, SparsityRatio};
use crate::tensor::Tensor;
use crate::trainer::{compute_loss, LossOutput};

type HeteroFn = fn(&[u64], f64) -> Result<Vec<f64>>;
type SemanticFn = fn(&[Vec<u64>], f64) -> Result<Vec<Vec<f64>>>;
type BlendFn = fn(&mut NetworkState, &NetworkState, f64) -> Result<()>;
type LossFn = fn(&Tensor, &[usize], Option<(&Tensor, &Tensor)>, f64) -> Result<LossOutput>;

/// The implementations a suite run checks.
#[derive(Clone, Copy)]
pub struct Formulas {
    pub hetero: HeteroFn,
    pub semantic: SemanticFn,
    pub blend: BlendFn,
    pub loss: LossFn,
}

impl Formulas {
    pub const ENGINE: Formulas =
        Formulas { hetero: update_hetero, semantic: update_semantic, blend: ema_blend, loss: compute_loss };
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub id: &'static str,
    pub description: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn(&Formulas, &mut EngineRng) -> std::result::Result<String, String>;

const CHECKS: &[(&str, &str, Check)] = &[
    ("hetero-oracle", "heterogeneous retention matches exp(-A/max * pi_h)", check_hetero),
    ("semantic-oracle", "semantic retention matches 1 - exp(-A/max * pi_s)", check_semantic),
    ("ema-oracle", "long-term blend matches alpha * s + (1 - alpha) * w", check_blend),
    ("loss-oracle", "overall loss matches CE + gamma * MSE", check_loss),
    ("kwta-exact-count", "k-WTA keeps exactly max(1, round(%k C)) filters", check_kwta_count),
    ("kwta-tie-break", "ties at the threshold go to the lower filter index", check_ties),
    ("retain-count", "heterogeneous retain count is ceil(1.1 %k N) clamped to N", check_retain),
    ("reservoir-occupancy", "buffer holds min(seen, M) items after every insert", check_occupancy),
    ("reservoir-uniformity", "every stream item is kept with probability M/n", check_uniformity),
    ("replay-uniformity", "replay draws are uniform over stored items", check_replay),
    ("ema-trigger-rate", "consolidation fires with frequency r", check_trigger),
    ("gradient-fidelity", "backward matches central finite differences", check_gradients),
    ("checkpoint-roundtrip", "checkpoints restore parameters bit for bit", check_checkpoint),
];

/// Identifiers of every check, in run order.
pub fn invariant_ids() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

pub fn run_suite(formulas: &Formulas) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, &(id, description, check))| {
            let mut rng = stream(0x5eed + i as u64, Stream::Data);
            let start = Instant::now();
            let (passed, detail) = match check(formulas, &mut rng) {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckOutcome { id, description, passed, detail, seconds: start.elapsed().as_secs_f64() }
        })
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

const TRIALS: usize = 1000;
const FORMULA_TOL: f64 = 1e-12;

fn random_counts(rng: &mut EngineRng, n: usize) -> Vec<u64> {
    (0..n).map(|_| if rng.gen_bool(0.2) { 0 } else { rng.gen_range(0..5000) }).collect()
}

fn check_hetero(f: &Formulas, rng: &mut EngineRng) -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let n = rng.gen_range(1..64);
        let counts = random_counts(rng, n);
        let pi = rng.gen_range(0.0..5.0);
        let got = (f.hetero)(&counts, pi).map_err(|e| e.to_string())?;
        let max = *counts.iter().max().unwrap() as f64;
        for (j, &a) in counts.iter().enumerate() {
            let want = if max == 0.0 { 1.0 } else { (-(a as f64) / max * pi).exp() };
            worst = worst.max(rel_err(got[j], want));
        }
    }
    let zero = (f.hetero)(&[0, 0, 0], 0.5).map_err(|e| e.to_string())?;
    let pi0 = (f.hetero)(&[3, 9, 1], 0.0).map_err(|e| e.to_string())?;
    if zero != [1.0; 3] || pi0 != [1.0; 3] {
        return Err(format!("degenerate cases: zero counts -> {zero:?}, pi_h = 0 -> {pi0:?}"));
    }
    if worst > FORMULA_TOL {
        return Err(format!("max relative error {worst:.3e}"));
    }
    Ok(format!("{TRIALS} inputs, max relative error {worst:.1e}"))
}

fn check_semantic(f: &Formulas, rng: &mut EngineRng) -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let n = rng.gen_range(1..32);
        let rows: Vec<Vec<u64>> = (0..rng.gen_range(1..6))
            .map(|_| if rng.gen_bool(0.2) { vec![0; n] } else { random_counts(rng, n) })
            .collect();
        let pi = rng.gen_range(0.0..5.0);
        let got = (f.semantic)(&rows, pi).map_err(|e| e.to_string())?;
        for (c, row) in rows.iter().enumerate() {
            let max = *row.iter().max().unwrap() as f64;
            for (j, &a) in row.iter().enumerate() {
                let want = if max == 0.0 { 0.0 } else { 1.0 - (-(a as f64) / max * pi).exp() };
                let g = got[c][j];
                if !(0.0..=1.0).contains(&g) {
                    return Err(format!("probability {g} outside [0, 1]"));
                }
                worst = worst.max(if want == 0.0 { g.abs() } else { rel_err(g, want) });
            }
        }
    }
    if worst > FORMULA_TOL {
        return Err(format!("max relative error {worst:.3e}"));
    }
    Ok(format!("{TRIALS} inputs, max relative error {worst:.1e}"))
}

fn vector_net(values: &[f64]) -> NetworkState {
    let n = values.len();
    let layer = Layer::Linear {
        weight: Tensor::new(vec![1, n], values.to_vec()).expect("positive length"),
        bias: Tensor::zeros(&[1]),
        activation: Activation::Identity,
    };
    NetworkState::from_layers(vec![n], vec![layer], 1).expect("single linear layer")
}

fn check_blend(f: &Formulas, rng: &mut EngineRng) -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let n = rng.gen_range(1..16);
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let alpha = rng.gen::<f64>();
        let mut stable = vector_net(&s);
        (f.blend)(&mut stable, &vector_net(&w), alpha).map_err(|e| e.to_string())?;
        let got = stable.layers()[0].params().expect("linear").0.data().to_vec();
        for j in 0..n {
            let want = alpha * s[j] + (1.0 - alpha) * w[j];
            worst = worst.max(if want == 0.0 { got[j].abs() } else { rel_err(got[j], want) });
        }
    }
    let mut fixed = vector_net(&[0.0]);
    (f.blend)(&mut fixed, &vector_net(&[1.0]), 0.999).map_err(|e| e.to_string())?;
    let one_step = fixed.layers()[0].params().expect("linear").0.data()[0];
    if rel_err(one_step, 0.001) > 1e-12 {
        return Err(format!("alpha = 0.999 from 0 towards 1 gave {one_step}, expected 0.001"));
    }
    if worst > FORMULA_TOL {
        return Err(format!("max relative error {worst:.3e}"));
    }
    Ok(format!("{TRIALS} inputs, max relative error {worst:.1e}"))
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_loss(f: &Formulas, rng: &mut EngineRng) -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let classes = rng.gen_range(2..8);
        let n_task = rng.gen_range(1..5);
        let n_mem = rng.gen_range(0..5);
        let n = n_task + n_mem;
        let logits: Vec<f64> = (0..n * classes).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let z: Vec<f64> = (0..n_mem * classes).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let gamma = rng.gen_range(0.0..1.0);
        let all = Tensor::new(vec![n, classes], logits.clone()).expect("sizes match");
        let mem = (n_mem > 0).then(|| {
            (
                all.slice_rows(n_task, n).expect("rows exist"),
                Tensor::new(vec![n_mem, classes], z.clone()).expect("sizes match"),
            )
        });
        let got = (f.loss)(&all, &labels, mem.as_ref().map(|(a, b)| (a, b)), gamma).map_err(|e| e.to_string())?;
        let ce: f64 = (0..n)
            .map(|i| {
                let row = &logits[i * classes..(i + 1) * classes];
                log_sum_exp(row) - row[labels[i]]
            })
            .sum::<f64>()
            / n as f64;
        let kr = if n_mem == 0 {
            0.0
        } else {
            logits[n_task * classes..].iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                / (n_mem * classes) as f64
        };
        worst = worst.max(rel_err(got.total, ce + gamma * kr));
    }
    let x = Tensor::new(vec![1, 2], vec![0.3, -0.2]).expect("sizes match");
    let z = Tensor::new(vec![1, 2], vec![5.0, 5.0]).expect("sizes match");
    let g0 = (f.loss)(&x, &[1], Some((&x, &z)), 0.0).map_err(|e| e.to_string())?;
    let ce = log_sum_exp(&[0.3, -0.2]) + 0.2;
    if rel_err(g0.total, ce) > 1e-15 {
        return Err(format!("gamma = 0 gave {} but cross-entropy alone is {ce}", g0.total));
    }
    if worst > FORMULA_TOL {
        return Err(format!("max relative error {worst:.3e}"));
    }
    Ok(format!("{TRIALS} inputs, max relative error {worst:.1e}"))
}

const RATIOS: [f64; 5] = [0.25, 0.5, 0.8, 0.9, 1.0];

fn check_kwta_count(_: &Formulas, rng: &mut EngineRng) -> std::result::Result<String, String> {
    for trial in 0..TRIALS {
        let c = rng.gen_range(4..=64);
        let (h, w) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let ratio = SparsityRatio::new(RATIOS[trial % RATIOS.len()]).expect("valid ratio");
        let map = Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.gen_range(0.01..1.0)).collect())
            .expect("sizes match");
        let pre: Option<Vec<bool>> = (trial % 3 == 0).then(|| (0..c).map(|_| rng.gen_bool(0.5)).collect());
        let out = apply_kwta(&map, pre.as_deref(), ratio).map_err(|e| e.to_string())?;
        let k = ((ratio.get() * c as f64 + 0.5).floor() as usize).max(1);
        let survivors = pre.as_ref().map_or(c, |p| p.iter().filter(|&&b| b).count());
        let nonzero = out.data().chunks(h * w).filter(|m| m.iter().any(|&v| v != 0.0)).count();
        if nonzero != k.min(survivors) {
            return Err(format!(
                "C = {c}, %k = {}: {nonzero} nonzero filters, expected {}",
                ratio.get(),
                k.min(survivors)
            ));
        }
    }
    Ok(format!("{TRIALS} maps"))
}

fn check_ties(_: &Formulas, _: &mut EngineRng) -> std::result::Result<String, String> {
    let third = SparsityRatio::new(1.0 / 3.0).expect("valid ratio");
    let m = kwta_mask(&[2.0, 2.0, 2.0], third);
    let half = kwta_mask(&[3.0, 1.0, 2.0, 5.0], SparsityRatio::new(0.5).expect("valid ratio"));
    if m != [true, false, false] || half != [true, false, false, true] {
        return Err(format!("got {m:?} and {half:?}"));
    }
    Ok("[2,2,2] -> [1,0,0]; [3,1,2,5] -> [1,0,0,1]".into())
}

fn check_retain(_: &Formulas, _: &mut EngineRng) -> std::result::Result<String, String> {
    let r = |v| SparsityRatio::new(v).expect("valid ratio");
    let cases = [(10, 0.8, 9), (10, 1.0, 10), (20, 0.5, 11), (32, 0.8, 29)];
    for (n, k, want) in cases {
        let got = retain_count(n, r(k), 1.1);
        if got != want {
            return Err(format!("N = {n}, %k = {k}: got {got}, expected {want}"));
        }
    }
    Ok(format!("{} cases", cases.len()))
}

fn check_occupancy(_: &Formulas, rng: &mut EngineRng) -> std::result::Result<String, String> {
    let mut mem = EpisodicMemory::new(17, &[1]);
    for i in 0..500u64 {
        mem.insert(StoredItem { input: vec![i as f64], label: 0, task: None }, rng).map_err(|e| e.to_string())?;
        if mem.len() as u64 != (i + 1).min(17) || mem.seen() != i + 1 {
            return Err(format!("after {} inserts the buffer holds {}", i + 1, mem.len()));
        }
    }
    Ok("500 inserts into M = 17".into())
}

fn check_uniformity(_: &Formulas, rng: &mut EngineRng) -> std::result::Result<String, String> {
    let (m, n, trials) = (100usize, 10_000usize, 1000usize);
    let mut hits = vec![0u64; n];
    for _ in 0..trials {
        let mut r = Reservoir::new(m);
        for i in 0..n {
            r.insert(i, rng);
        }
        for &i in r.items() {
            hits[i] += 1;
        }
    }
    let p = m as f64 / n as f64;
    let expected = trials as f64 * p;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    let outside = hits.iter().filter(|&&h| (h as f64 - expected).abs() > 3.0 * sigma).count();
    let chi2: f64 = hits.iter().map(|&h| (h as f64 - expected).powi(2) / expected).sum();
    let pval = 1.0 - ChiSquared::new((n - 1) as f64).expect("positive dof").cdf(chi2);
    let frac = outside as f64 / n as f64;
    if pval <= 0.01 || frac > 0.01 {
        return Err(format!("chi-square p = {pval:.4}, {outside} items beyond 3 sigma"));
    }
    Ok(format!("chi-square p = {pval:.3}, {:.2}% of items beyond 3 sigma", 100.0 * frac))
}

fn check_replay(_: &Formulas, rng: &mut EngineRng) -> std::result::Result<String, String> {
    let mut mem = EpisodicMemory::new(8, &[1]);
    for i in 0..8 {
        mem.insert(StoredItem { input: vec![i as f64], label: i, task: None }, rng).map_err(|e| e.to_string())?;
    }
    let draws = 100_000;
    let mut counts = [0u64; 8];
    for _ in 0..draws / 100 {
        for s in mem.sample_batch(100, rng).expect("non-empty").slots {
            counts[s] += 1;
        }
    }
    let p = 1.0 / 8.0;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (s, &c) in counts.iter().enumerate() {
        if (c as f64 - draws as f64 * p).abs() > 3.0 * sigma {
            return Err(format!("slot {s} drawn {c} times of {draws}"));
        }
    }
    Ok(format!("{draws} draws over 8 slots"))
}

fn check_trigger(_: &Formulas, rng: &mut EngineRng) -> std::result::Result<String, String> {
    let cfg = crate::memory::ConsolidationConfig { alpha: 0.5, rate: 0.3 };
    let mut stable = vector_net(&[0.0]);
    let working = vector_net(&[1.0]);
    let steps = 10_000;
    let mut fired = 0;
    for _ in 0..steps {
        if crate::memory::ema_update(&mut stable, &working, &cfg, rng).map_err(|e| e.to_string())? {
            fired += 1;
        }
    }
    let sigma = (steps as f64 * 0.3 * 0.7).sqrt();
    if (fired as f64 - steps as f64 * 0.3).abs() > 3.0 * sigma {
        return Err(format!("fired {fired} of {steps} times at r = 0.3"));
    }
    Ok(format!("fired {fired} of {steps} at r = 0.3"))
}

fn check_gradients(_: &Formulas, rng: &mut EngineRng) -> std::result::Result<String, String> {
    let mut total = 0;
    let mut within = 0;
    for seed in 0..20u64 {
        let ratio = SparsityRatio::new([0.5, 0.75, 1.0][seed as usize % 3]).expect("valid ratio");
        let specs = [
            LayerSpec::Conv {
                filters: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
                activation: Activation::Sparse(HookConfig { ratio, dropout: true }),
            },
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Linear { units: 3, activation: Activation::Identity },
        ];
        let net =
            NetworkState::build(&[2, 4, 4], &specs, 3, &mut stream(seed, Stream::Init)).map_err(|e| e.to_string())?;
        let x = Tensor::new(vec![3, 2, 4, 4], (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sizes");
        let report = check_network(&net, &x, &[0, 1, 2], None, 1e-5, 1e-4).map_err(|e| e.to_string())?;
        total += report.entries;
        within += report.within;
    }
    let frac = within as f64 / total as f64;
    if frac < 0.99 {
        return Err(format!("{within} of {total} entries within 1e-4"));
    }
    Ok(format!("{within} of {total} entries within 1e-4"))
}

fn check_checkpoint(_: &Formulas, rng: &mut EngineRng) -> std::result::Result<String, String> {
    let values: Vec<f64> = (0..40).map(|_| rng.gen::<f64>() * 1e3 - 5e2).collect();
    let net = vector_net(&values);
    let mut ck = Checkpoint::default();
    ck.add_network("net", &net);
    let mut bytes = Vec::new();
    ck.write_to(&mut bytes).map_err(|e| e.to_string())?;
    let back = Checkpoint::read_from(bytes.as_slice(), std::path::Path::new("<memory>")).map_err(|e| e.to_string())?;
    let mut restored = vector_net(&[0.0; 40]);
    back.load_network("net", &mut restored).map_err(|e| e.to_string())?;
    let same = restored
        .params()
        .zip(net.params())
        .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    if !same {
        return Err("restored parameters differ".into());
    }
    Ok(format!("{} bytes", bytes.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped_semantic(rows: &[Vec<u64>], pi: f64) -> Result<Vec<Vec<f64>>> {
        let mut p = update_semantic(rows, -pi.abs()).or_else(|_| update_semantic(rows, 0.0))?;
        for (row, counts) in p.iter_mut().zip(rows) {
            let max = counts.iter().copied().max().unwrap_or(0);
            if max > 0 {
                for (v, &a) in row.iter_mut().zip(counts) {
                    *v = 1.0 - (a as f64 / max as f64 * pi).exp();
                }
            }
        }
        Ok(p)
    }

    #[test]
    fn every_check_has_a_unique_id() {
        let mut ids = invariant_ids();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn sign_flip_in_semantic_formula_is_named() {
        let broken = Formulas { semantic: flipped_semantic, ..Formulas::ENGINE };
        let mut rng = stream(1, Stream::Data);
        assert!(check_semantic(&broken, &mut rng).is_err());
        assert!(check_semantic(&Formulas::ENGINE, &mut rng).is_ok());
    }
}
