//! Brute-force checkers. Nothing here shares code with the quantity it checks.

use std::cell::Cell;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::BetaSchedule;
use crate::selector::{ParamGradients, SelectorParams, BLOCK_NAMES};
use crate::training::{
    forward_backward, init_params, smoothness_margin, ste_anchor, ste_probe_total, Cap,
    PreparedSlide, TrainConfig,
};
use crate::wsi_data::{generate_synthetic, SyntheticSpec};

pub const EXHAUSTIVE_MAX_N: usize = 20;

/// Index set (ascending) of size `k` maximising the score sum, found by
/// enumerating every `k`-subset in lexicographic order; the first maximiser
/// wins. Sums are taken over descending-sorted values so that subsets with
/// equal score multisets compare equal.
pub fn exhaustive_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if n > EXHAUSTIVE_MAX_N {
        return Err(Error::validation(format!(
            "exhaustive top-k limited to n <= {EXHAUSTIVE_MAX_N}, got {n}"
        )));
    }
    if k > n {
        return Err(Error::validation(format!("cannot pick {k} of {n}")));
    }
    let mut combo: Vec<usize> = (0..k).collect();
    let mut best = combo.clone();
    let mut best_sum = f64::NEG_INFINITY;
    let mut vals = Vec::with_capacity(k);
    loop {
        vals.clear();
        vals.extend(combo.iter().map(|&i| scores[i]));
        vals.sort_by(|a, b| b.total_cmp(a));
        let sum: f64 = vals.iter().sum();
        if sum > best_sum {
            best_sum = sum;
            best.clone_from(&combo);
        }
        // next combination in lexicographic order
        let mut pos = k;
        loop {
            if pos == 0 {
                return Ok(best);
            }
            pos -= 1;
            if combo[pos] < n - k + pos {
                break;
            }
        }
        combo[pos] += 1;
        for q in pos + 1..k {
            combo[q] = combo[q - 1] + 1;
        }
    }
}

/// Bernoulli KL as an explicit sum over the two outcomes, arguments clamped
/// to `[1e-6, 1 - 1e-6]`.
pub fn kl_direct(pi: f64, p: f64) -> f64 {
    let lo = 1e-6;
    let hi = 1.0 - 1e-6;
    let pi = pi.max(lo).min(hi);
    let p = p.max(lo).min(hi);
    let post = [pi, 1.0 - pi];
    let prior = [p, 1.0 - p];
    post.iter()
        .zip(prior.iter())
        .map(|(a, b)| a * (a.ln() - b.ln()))
        .sum()
}

/// Central differences `(f(θ + h e) - f(θ - h e)) / 2h` for every coordinate.
pub fn finite_diff<F>(mut f: F, params: &SelectorParams, step: f64) -> ParamGradients
where
    F: FnMut(&SelectorParams) -> f64,
{
    let mut probe = params.clone();
    let mut grad = params.zeros_like();
    let sizes: Vec<usize> = params.blocks().iter().map(|b| b.len()).collect();
    for (b, &len) in sizes.iter().enumerate() {
        for k in 0..len {
            let orig = params.blocks()[b][k];
            probe.blocks_mut()[b][k] = orig + step;
            let up = f(&probe);
            probe.blocks_mut()[b][k] = orig - step;
            let down = f(&probe);
            probe.blocks_mut()[b][k] = orig;
            grad.blocks_mut()[b][k] = (up - down) / (2.0 * step);
        }
    }
    grad
}

fn binomial(n: u64, k: u64) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigInt::one();
    for i in 0..k {
        acc = acc * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    acc
}

/// Exact expected F1 of a uniform random `k`-subset of `n` patches with `t`
/// relevant ones, summed over the hypergeometric law of the hit count.
pub fn expected_random_f1(n: u64, t: u64, k: u64) -> Result<f64> {
    if t > n || k > n {
        return Err(Error::validation(format!(
            "need t <= n and k <= n, got n={n} t={t} k={k}"
        )));
    }
    if t == 0 || k == 0 {
        return Ok(0.0);
    }
    let total = binomial(n, k);
    let mut expectation = BigRational::zero();
    let lo = k.saturating_sub(n - t);
    for x in lo..=k.min(t) {
        let ways = binomial(t, x) * binomial(n - t, k - x);
        let prob = BigRational::new(ways, total.clone());
        let precision = BigRational::new(BigInt::from(x), BigInt::from(k));
        let recall = BigRational::new(BigInt::from(x), BigInt::from(t));
        let denom = &precision + &recall;
        let f1 = if denom.is_zero() {
            BigRational::zero()
        } else {
            BigRational::from_integer(BigInt::from(2)) * &precision * &recall / denom
        };
        expectation += prob * f1;
    }
    expectation
        .to_f64()
        .ok_or_else(|| Error::validation("expected F1 not representable"))
}

/// Settings of one gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub m_tissues: usize,
    pub dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    pub step: f64,
    pub tolerance: f64,
    /// Distance to the nearest non-smooth point below which an instance is
    /// re-sampled.
    pub boundary_margin: f64,
    pub max_resamples: u32,
    pub cap: Option<Cap>,
    pub schedule: BetaSchedule,
    pub iter: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid_rows: 4,
            grid_cols: 8,
            m_tissues: 3,
            dim: 8,
            hidden: 4,
            classes: 4,
            noise_sigma: 0.3,
            step: 1e-5,
            tolerance: 1e-4,
            boundary_margin: 1e-6,
            max_resamples: 50,
            cap: None,
            schedule: BetaSchedule::default(),
            iter: 5000,
        }
    }
}

/// Denominator floor of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub block: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCoordinate {
    pub block: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub instance_seed: u64,
    pub boundary_resamples: u32,
    pub blocks: Vec<BlockError>,
    pub worst: WorstCoordinate,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the analytic straight-through gradient with central differences
/// of the probe total on a synthetic instance, re-sampling instances that sit
/// near a selection boundary or ReLU kink.
pub fn gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let train_cfg = TrainConfig {
        hidden: cfg.hidden,
        cap: cfg.cap,
        schedule: cfg.schedule,
        seed: cfg.seed,
        ..TrainConfig::new(cfg.dim, cfg.classes)
    };
    for attempt in 0..=cfg.max_resamples {
        let instance_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(attempt as u64);
        let spec = SyntheticSpec {
            grid_rows: cfg.grid_rows,
            grid_cols: cfg.grid_cols,
            m_tissues: cfg.m_tissues,
            dim: cfg.dim,
            n_classes: cfg.classes,
            noise_sigma: cfg.noise_sigma,
            blob_count: 2,
            class_signal_scale: 1.0,
            seed: instance_seed,
        };
        let slide = generate_synthetic(&spec)?;
        let prepared = PreparedSlide::new(&slide.bundle, &slide.prompts, &slide.question)?;
        let params = init_params(cfg.dim, cfg.hidden, cfg.classes, instance_seed);
        if smoothness_margin(&prepared, &params, &train_cfg, cfg.iter)? < cfg.boundary_margin {
            continue;
        }
        let anchor = ste_anchor(&prepared, &params, &train_cfg, cfg.iter)?;
        let left_piece = Cell::new(false);
        let mut failure = None;
        let numeric = finite_diff(
            |p| match ste_probe_total(&prepared, p, &train_cfg, cfg.iter, &anchor) {
                Ok(Some(v)) => v,
                Ok(None) => {
                    left_piece.set(true);
                    f64::NAN
                }
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            },
            &params,
            cfg.step,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        if left_piece.get() {
            continue;
        }
        let (_, _, analytic) = forward_backward(&prepared, &params, &train_cfg, cfg.iter)?;

        let mut blocks = Vec::new();
        let mut worst = WorstCoordinate {
            block: BLOCK_NAMES[0].to_string(),
            index: 0,
            analytic: 0.0,
            numeric: 0.0,
            rel_error: -1.0,
        };
        for ((a, n), name) in analytic.blocks().iter().zip(numeric.blocks()).zip(BLOCK_NAMES) {
            let mut block_max = 0.0f64;
            for (k, (&av, &nv)) in a.iter().zip(n.iter()).enumerate() {
                let e = relative_error(av, nv);
                block_max = block_max.max(e);
                if e > worst.rel_error {
                    worst = WorstCoordinate {
                        block: name.to_string(),
                        index: k,
                        analytic: av,
                        numeric: nv,
                        rel_error: e,
                    };
                }
            }
            blocks.push(BlockError {
                block: name.to_string(),
                max_rel_error: block_max,
            });
        }
        let max_rel_error = worst.rel_error;
        return Ok(GradCheckReport {
            seed: cfg.seed,
            instance_seed,
            boundary_resamples: attempt,
            blocks,
            worst,
            max_rel_error,
            tolerance: cfg.tolerance,
            passed: max_rel_error <= cfg.tolerance,
        });
    }
    Err(Error::validation(format!(
        "no smooth instance found for seed {} after {} resamples",
        cfg.seed, cfg.max_resamples
    )))
}
