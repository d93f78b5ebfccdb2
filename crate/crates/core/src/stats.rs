//! Virtual-batch bootstrap with BCa intervals, and the annotation-ambiguity
//! estimator chain.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::trainer::Classification;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile, Wichura's AS 241 (PPND16), relative error
/// about 1e-16 over `(0, 1)`. Returns ±∞ at 0 and 1.
pub fn normal_quantile(p: f64) -> f64 {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2509.0809287301226727 * r + 33430.575583588128105) * r + 67265.770927008700853) * r
                + 45921.953931549871457)
                * r
                + 13731.693765509461125)
                * r
                + 1971.5909503065514427)
                * r
                + 133.14166789178437745)
                * r
                + 3.387132872796366608)
            / (((((((5226.495278852545925 * r + 28729.085735721942674) * r + 39307.89580009271061) * r
                + 21213.794301586595867)
                * r
                + 5394.1960214247511077)
                * r
                + 687.1870074920579083)
                * r
                + 42.313330701600911252)
                * r
                + 1.0);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r + 0.24178072517745061177) * r
            + 1.27045825245236838258)
            * r
            + 3.64784832476320460504)
            * r
            + 5.7694972214606914055)
            * r
            + 4.6303378461565452959)
            * r
            + 1.42343711074968357734)
            / (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r + 0.0151986665636164571966)
                * r
                + 0.14810397642748007459)
                * r
                + 0.68976733498510000455)
                * r
                + 1.6763848301838038494)
                * r
                + 2.05319162663775882187)
                * r
                + 1.0)
    } else {
        let r = r - 5.0;
        (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 0.0012426609473880784386) * r
            + 0.026532189526576123093)
            * r
            + 0.29656057182850489123)
            * r
            + 1.7848265399172913358)
            * r
            + 5.4637849111641143699)
            * r
            + 6.6579046435011037772)
            / (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
                + 1.8463183175100546818e-5)
                * r
                + 7.868691311456132591e-4)
                * r
                + 0.0148753612908506148525)
                * r
                + 0.13692988092273580531)
                * r
                + 0.59983220655588793769)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

// ---------------------------------------------------------------- virtual batches

/// Per-member outcomes (e.g. "classified correctly") of one virtual batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualBatch {
    pub healthy: Vec<bool>,
    pub sick: Vec<bool>,
}

impl VirtualBatch {
    /// Fraction of true outcomes over all members.
    pub fn rate(&self) -> f64 {
        let n = self.healthy.len() + self.sick.len();
        let hits = self.healthy.iter().chain(&self.sick).filter(|&&b| b).count();
        hits as f64 / n as f64
    }
}

/// Deals `per_batch` items at a time from a shuffled pool, reshuffling when
/// the pool runs out. Members of a batch are distinct; batches are disjoint
/// while the pool lasts.
fn deal<T: Copy>(pool: &[T], per_batch: usize, batches: usize, seed: u64, stream: u64) -> Vec<Vec<T>> {
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut round = 0u64;
    let mut out = Vec::with_capacity(batches);
    for _ in 0..batches {
        if cursor + per_batch > order.len() {
            order = (0..pool.len()).collect();
            order.shuffle(&mut rng_for(seed, &[0xba, stream, round]));
            round += 1;
            cursor = 0;
        }
        out.push(order[cursor..cursor + per_batch].iter().map(|&i| pool[i]).collect());
        cursor += per_batch;
    }
    out
}

pub const BATCH_PER_CLASS: usize = 10;

/// `n_batches` virtual batches of 10 healthy + 10 sick correctness outcomes.
pub fn make_virtual_batches(items: &[Classification], n_batches: usize, seed: u64) -> Result<Vec<VirtualBatch>> {
    let pool = |class: usize| -> Vec<bool> { items.iter().filter(|c| c.label == class).map(|c| c.correct()).collect() };
    batches_from_outcomes(&pool(0), &pool(1), n_batches, seed)
}

/// Virtual batches from raw per-class outcome pools.
pub fn batches_from_outcomes(healthy: &[bool], sick: &[bool], n_batches: usize, seed: u64) -> Result<Vec<VirtualBatch>> {
    for (name, pool) in [("healthy", healthy), ("sick", sick)] {
        if pool.len() < BATCH_PER_CLASS {
            return Err(Error::Insufficient(format!(
                "{} {name} classifications; a virtual batch needs {BATCH_PER_CLASS}",
                pool.len()
            )));
        }
    }
    let h = deal(healthy, BATCH_PER_CLASS, n_batches, seed, 0);
    let s = deal(sick, BATCH_PER_CLASS, n_batches, seed, 1);
    Ok(h.into_iter().zip(s).map(|(healthy, sick)| VirtualBatch { healthy, sick }).collect())
}

// ---------------------------------------------------------------- BCa bootstrap

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub resamples: usize,
    pub observations: usize,
    /// Bias correction.
    pub z0: f64,
    /// Acceleration.
    pub acceleration: f64,
}

pub const DEFAULT_RESAMPLES: usize = 100_000;
const CHUNK: usize = 10_000;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sorted bootstrap distribution of the mean: `resamples` draws of
/// `values.len()` observations with replacement. Chunked with per-chunk
/// seeds, so the result is independent of thread count.
pub fn bootstrap_means(values: &[f64], resamples: usize, seed: u64) -> Vec<f64> {
    let n = values.len();
    let chunks = resamples.div_ceil(CHUNK);
    let mut stats: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = rng_for(seed, &[0xb0, c as u64]);
            let len = CHUNK.min(resamples - c * CHUNK);
            (0..len)
                .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
                .collect::<Vec<_>>()
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    stats
}

/// Jackknife acceleration `Σd³ / (6 (Σd²)^{3/2})`, `d = θ̄ − θ_(i)`, for the mean.
pub fn jackknife_acceleration(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let total: f64 = values.iter().sum();
    let loo: Vec<f64> = values.iter().map(|v| (total - v) / (n - 1) as f64).collect();
    let bar = mean(&loo);
    let (s2, s3) = loo.iter().fold((0.0, 0.0), |(s2, s3), t| {
        let d = bar - t;
        (s2 + d * d, s3 + d * d * d)
    });
    if s2 <= 0.0 {
        0.0
    } else {
        s3 / (6.0 * s2.powf(1.5))
    }
}

/// Inverse-CDF lookup: the smallest order statistic whose empirical CDF is ≥ q.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let b = sorted.len();
    let k = ((q * b as f64).ceil() as usize).clamp(1, b);
    sorted[k - 1]
}

/// BCa interval from a sorted bootstrap distribution.
pub fn bca_from_distribution(sorted: &[f64], estimate: f64, acceleration: f64, level: f64) -> (f64, f64, f64) {
    let b = sorted.len() as f64;
    // Strictly-below count, with a relative tolerance so float noise in a
    // resample that exactly reproduces the estimate does not count as below.
    let tol = 1e-9 * estimate.abs().max(1.0);
    let below = sorted.partition_point(|&t| t < estimate - tol) as f64;
    let z0 = normal_quantile((below / b).clamp(0.5 / b, 1.0 - 0.5 / b));
    let alpha = (1.0 - level) / 2.0;
    let adjust = |z: f64| {
        let s = z0 + z;
        normal_cdf(z0 + s / (1.0 - acceleration * s))
    };
    let lo = percentile(sorted, adjust(normal_quantile(alpha)));
    let hi = percentile(sorted, adjust(normal_quantile(1.0 - alpha)));
    (lo, hi, z0)
}

/// Bias-corrected and accelerated bootstrap interval for the mean of `values`.
pub fn bootstrap_bca(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<BootstrapResult> {
    if values.is_empty() {
        return Err(Error::Insufficient("bootstrap needs at least one observation".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level {level} outside (0, 1)")));
    }
    if resamples == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("bootstrap observations".into()));
    }
    let estimate = mean(values);
    let degenerate = values.iter().all(|&v| v == values[0]);
    if degenerate {
        return Ok(BootstrapResult {
            estimate,
            lower: estimate,
            upper: estimate,
            level,
            resamples,
            observations: values.len(),
            z0: 0.0,
            acceleration: 0.0,
        });
    }
    let sorted = bootstrap_means(values, resamples, seed);
    let acceleration = jackknife_acceleration(values);
    let (lower, upper, z0) = bca_from_distribution(&sorted, estimate, acceleration, level);
    Ok(BootstrapResult { estimate, lower, upper, level, resamples, observations: values.len(), z0, acceleration })
}

/// Plain percentile interval, for comparison.
pub fn percentile_interval(values: &[f64], resamples: usize, level: f64, seed: u64) -> (f64, f64) {
    let sorted = bootstrap_means(values, resamples, seed);
    let alpha = (1.0 - level) / 2.0;
    (percentile(&sorted, alpha), percentile(&sorted, 1.0 - alpha))
}

/// Accuracy over virtual batches with its BCa interval.
pub fn accuracy_bootstrap(
    items: &[Classification],
    n_batches: usize,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    let batches = make_virtual_batches(items, n_batches, seed)?;
    let rates: Vec<f64> = batches.iter().map(VirtualBatch::rate).collect();
    bootstrap_bca(&rates, resamples, level, seed ^ 0xb007)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthyRate {
    /// Fraction of images predicted healthy (direct recount).
    pub rate: f64,
    pub images: usize,
    pub bootstrap: BootstrapResult,
}

/// Fraction of (never-exposed) images predicted healthy, with a BCa
/// interval over healthy-only virtual batches of 20.
pub fn healthy_rate(
    items: &[Classification],
    n_batches: usize,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<HealthyRate> {
    if items.is_empty() {
        return Err(Error::Insufficient("healthy rate needs at least one classification".into()));
    }
    let outcomes: Vec<bool> = items.iter().map(|c| c.predicted == 0).collect();
    let per = 2 * BATCH_PER_CLASS;
    if outcomes.len() < per {
        return Err(Error::Insufficient(format!("{} images; a virtual batch needs {per}", outcomes.len())));
    }
    let rates: Vec<f64> = deal(&outcomes, per, n_batches, seed, 2)
        .iter()
        .map(|b| b.iter().filter(|&&h| h).count() as f64 / per as f64)
        .collect();
    let rate = outcomes.iter().filter(|&&h| h).count() as f64 / outcomes.len() as f64;
    Ok(HealthyRate { rate, images: outcomes.len(), bootstrap: bootstrap_bca(&rates, resamples, level, seed ^ 0xb007)? })
}

// ---------------------------------------------------------------- ambiguity chain

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceReport {
    pub overlaps: usize,
    pub disagreements: usize,
    /// Disagreement rate among overlapping pairs.
    pub disagreement_rate: f64,
    /// Implied ambiguous fraction of the unfiltered labels.
    pub ambiguous_fraction: f64,
    /// Ambiguous fraction remaining after discarding disagreements.
    pub residual_ambiguous: f64,
    /// Implied upper bound on achievable accuracy.
    pub performance_bound: f64,
}

/// If an ambiguous image is labeled at random, two annotators disagree on
/// half of them, so the ambiguous fraction is twice the disagreement rate;
/// filtering removes the disagreeing half, leaving `d/(1−d)` ambiguous.
pub fn ambiguity_chain(disagreements: usize, overlaps: usize) -> Result<ConcordanceReport> {
    if overlaps == 0 {
        return Err(Error::Insufficient("no overlapping annotations".into()));
    }
    if disagreements > overlaps {
        return Err(Error::invalid(format!("{disagreements} disagreements exceed {overlaps} overlaps")));
    }
    let d = disagreements as f64 / overlaps as f64;
    if d >= 0.5 {
        return Err(Error::invalid(format!(
            "disagreement rate {d:.3} ≥ 0.5: random-labeling model does not apply"
        )));
    }
    let r = d / (1.0 - d);
    Ok(ConcordanceReport {
        overlaps,
        disagreements,
        disagreement_rate: d,
        ambiguous_fraction: 2.0 * d,
        residual_ambiguous: r,
        performance_bound: 1.0 - r,
    })
}
