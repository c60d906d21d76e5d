//! Estimators with error bars and comparison statistics for chain output.

use std::collections::BTreeMap;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::{Error, Result};

/// Fewest batches for which a batch-means standard error is reported.
pub const MIN_BATCHES: usize = 20;

/// A point estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn new(value: f64, std_error: f64) -> Self {
        Self { value, std_error }
    }

    /// `|a - b| / sqrt(se_a² + se_b²)`; zero when both agree exactly.
    pub fn z_score(&self, other: &Estimate) -> f64 {
        let diff = (self.value - other.value).abs();
        let se = self.std_error.hypot(other.std_error);
        if diff == 0.0 {
            0.0
        } else if se == 0.0 {
            f64::INFINITY
        } else {
            diff / se
        }
    }
}

/// An ergodic average with its batch-means standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErgodicEstimate {
    pub value: f64,
    pub std_error: f64,
    pub batches: usize,
    pub burn_in: usize,
}

impl ErgodicEstimate {
    pub fn estimate(&self) -> Estimate {
        Estimate::new(self.value, self.std_error)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean of `batch` values, treated as independent.
fn batch_se(batch: &[f64]) -> f64 {
    let b = batch.len() as f64;
    let mu = mean(batch);
    let ss: f64 = batch.iter().map(|v| (v - mu) * (v - mu)).sum();
    (ss / (b - 1.0) / b).sqrt()
}

/// Mean of `series[burn_in..]` with a standard error from `batches`
/// non-overlapping batch means. A remainder that does not fill a whole batch
/// counts towards the mean but not the error bar.
pub fn ergodic_average(series: &[f64], burn_in: usize, batches: usize) -> Result<ErgodicEstimate> {
    if batches < MIN_BATCHES {
        return Err(Error::InvalidParameter(format!(
            "at least {MIN_BATCHES} batches are needed, got {batches}"
        )));
    }
    let kept = series.len().saturating_sub(burn_in);
    if kept < batches {
        return Err(Error::TooShort(format!(
            "{kept} values after burn-in cannot fill {batches} batches"
        )));
    }
    let tail = &series[burn_in..];
    let size = kept / batches;
    let means: Vec<f64> = tail.chunks_exact(size).take(batches).map(mean).collect();
    Ok(ErgodicEstimate {
        value: mean(tail),
        std_error: batch_se(&means),
        batches,
        burn_in,
    })
}

/// Online batch accumulator for first and second moments of a vector.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    width: usize,
    batch_size: u64,
    in_batch: u64,
    count: u64,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    batch_sum: Vec<f64>,
    batch_sumsq: Vec<f64>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl BatchMoments {
    pub fn new(width: usize, batch_size: u64) -> Self {
        Self {
            width,
            batch_size: batch_size.max(1),
            in_batch: 0,
            count: 0,
            sum: vec![0.0; width],
            sumsq: vec![0.0; width],
            batch_sum: vec![0.0; width],
            batch_sumsq: vec![0.0; width],
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.width);
        for i in 0..self.width {
            let v = x[i];
            self.batch_sum[i] += v;
            self.batch_sumsq[i] += v * v;
        }
        self.in_batch += 1;
        self.count += 1;
        if self.in_batch == self.batch_size {
            let n = self.batch_size as f64;
            self.first.push(self.batch_sum.iter().map(|s| s / n).collect());
            self.second.push(self.batch_sumsq.iter().map(|s| s / n).collect());
            for i in 0..self.width {
                self.sum[i] += self.batch_sum[i];
                self.sumsq[i] += self.batch_sumsq[i];
                self.batch_sum[i] = 0.0;
                self.batch_sumsq[i] = 0.0;
            }
            self.in_batch = 0;
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn batches(&self) -> usize {
        self.first.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Overall mean of coordinate `i`, including any partial batch.
    pub fn mean(&self, i: usize) -> f64 {
        (self.sum[i] + self.batch_sum[i]) / self.count as f64
    }

    fn raw_second(&self, i: usize) -> f64 {
        (self.sumsq[i] + self.batch_sumsq[i]) / self.count as f64
    }

    /// Mean of coordinate `i`. The error bar is NaN below [`MIN_BATCHES`].
    pub fn mean_estimate(&self, i: usize) -> Estimate {
        let se = if self.batches() >= MIN_BATCHES {
            let b: Vec<f64> = self.first.iter().map(|m| m[i]).collect();
            batch_se(&b)
        } else {
            f64::NAN
        };
        Estimate::new(self.mean(i), se)
    }

    /// Variance of coordinate `i`. The error bar comes from batch values
    /// `q_b = m2_b - 2μ m1_b + μ²`, whose average is the variance estimate.
    pub fn variance_estimate(&self, i: usize) -> Estimate {
        let mu = self.mean(i);
        let value = self.raw_second(i) - mu * mu;
        let se = if self.batches() >= MIN_BATCHES {
            let q: Vec<f64> = self
                .first
                .iter()
                .zip(&self.second)
                .map(|(m1, m2)| m2[i] - 2.0 * mu * m1[i] + mu * mu)
                .collect();
            batch_se(&q)
        } else {
            f64::NAN
        };
        Estimate::new(value, se)
    }

    /// Batch means of coordinate `i`.
    pub fn batch_means(&self, i: usize) -> Vec<f64> {
        self.first.iter().map(|m| m[i]).collect()
    }

    pub fn batch_second_moments(&self, i: usize) -> Vec<f64> {
        self.second.iter().map(|m| m[i]).collect()
    }
}

/// Integrated autocorrelation time by Geyer's initial positive sequence.
/// A constant series has IACT 1 by convention.
pub fn iact(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 2 {
        return 1.0;
    }
    let mu = mean(series);
    let var = series.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
    if !(var > 0.0) {
        return 1.0;
    }
    let acov = autocovariance(series, mu);
    let rho = |k: usize| if k < n { acov[k] / acov[0] } else { 0.0 };
    let mut tau = -1.0;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = rho(2 * k) + rho(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 1;
    }
    tau.max(1e-12)
}

/// Biased sample autocovariance at all lags, by zero-padded FFT.
fn autocovariance(series: &[f64], mu: f64) -> Vec<f64> {
    let n = series.len();
    let len = (2 * n).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut buf: Vec<Complex<f64>> = series
        .iter()
        .map(|v| Complex::new(v - mu, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(len)
        .collect();
    fwd.process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    inv.process(&mut buf);
    buf.iter().take(n).map(|c| c.re / (len as f64 * n as f64)).collect()
}

/// Effective sample size `n / IACT`.
pub fn effective_sample_size(series: &[f64]) -> f64 {
    series.len() as f64 / iact(series)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    ks_distance_weighted(a, None, b, None)
}

/// Kolmogorov–Smirnov statistic between weighted empirical distributions.
/// Weights are given as log-weights and normalized internally.
pub fn ks_distance_weighted(
    a: &[f64],
    log_wa: Option<&[f64]>,
    b: &[f64],
    log_wb: Option<&[f64]>,
) -> f64 {
    let sa = sorted_weighted(a, log_wa);
    let sb = sorted_weighted(b, log_wb);
    if sa.is_empty() || sb.is_empty() {
        return if sa.is_empty() && sb.is_empty() { 0.0 } else { 1.0 };
    }
    let (mut i, mut j) = (0, 0);
    let (mut fa, mut fb) = (0.0f64, 0.0f64);
    let mut d = 0.0f64;
    while i < sa.len() || j < sb.len() {
        let x = match (sa.get(i), sb.get(j)) {
            (Some(p), Some(q)) => p.0.min(q.0),
            (Some(p), None) => p.0,
            (None, Some(q)) => q.0,
            (None, None) => unreachable!(),
        };
        while i < sa.len() && sa[i].0 == x {
            fa += sa[i].1;
            i += 1;
        }
        while j < sb.len() && sb[j].0 == x {
            fb += sb[j].1;
            j += 1;
        }
        d = d.max((fa - fb).abs());
    }
    d.min(1.0)
}

fn sorted_weighted(x: &[f64], log_w: Option<&[f64]>) -> Vec<(f64, f64)> {
    let w = normalized_weights(x.len(), log_w);
    let mut v: Vec<(f64, f64)> = x.iter().copied().zip(w).filter(|p| !p.0.is_nan()).collect();
    v.sort_by(|p, q| p.0.total_cmp(&q.0));
    v
}

/// Normalized weights from optional log-weights.
pub fn normalized_weights(n: usize, log_w: Option<&[f64]>) -> Vec<f64> {
    match log_w {
        None => vec![1.0 / n as f64; n],
        Some(lw) => {
            let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = lw.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = w.iter().sum();
            w.into_iter().map(|v| v / total).collect()
        }
    }
}

/// Thresholds for [`compare_report`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gates {
    pub max_z: f64,
    pub max_ks: f64,
}

impl Default for Gates {
    fn default() -> Self {
        Self { max_z: 3.0, max_ks: 0.05 }
    }
}

/// Named estimates on a grid, as produced by a chain or an oracle.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    /// Grid nodes `u_m` the functionals refer to.
    pub nodes: Vec<f64>,
    pub functionals: BTreeMap<String, Estimate>,
}

/// Samples of one scalar marginal, possibly weighted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Marginal {
    pub samples: Vec<f64>,
    pub log_weights: Option<Vec<f64>>,
}

impl Marginal {
    pub fn unweighted(samples: Vec<f64>) -> Self {
        Self { samples, log_weights: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FunctionalRow {
    pub name: String,
    pub chain: Estimate,
    pub reference: Estimate,
    pub z: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarginalRow {
    pub name: String,
    pub ks: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareReport {
    pub gates: Gates,
    pub functionals: Vec<FunctionalRow>,
    pub marginals: Vec<MarginalRow>,
}

impl CompareReport {
    pub fn passed(&self) -> bool {
        self.functionals.iter().all(|r| r.pass) && self.marginals.iter().all(|r| r.pass)
    }

    pub fn max_z(&self) -> f64 {
        self.functionals.iter().map(|r| r.z).fold(0.0, f64::max)
    }
}

/// Joins chain and reference summaries on common functional names and
/// computes z-scores and KS distances against the gates.
pub fn compare_report(
    chain: &Summary,
    reference: &Summary,
    marginals: &[(String, Marginal, Marginal)],
    gates: Gates,
) -> Result<CompareReport> {
    let same_grid = chain.nodes.len() == reference.nodes.len()
        && chain.nodes.iter().zip(&reference.nodes).all(|(a, b)| (a - b).abs() <= 1e-9);
    if !same_grid {
        return Err(Error::DimensionMismatch(format!(
            "chain grid has {} nodes, reference grid has {}",
            chain.nodes.len(),
            reference.nodes.len()
        )));
    }
    let functionals = chain
        .functionals
        .iter()
        .filter_map(|(name, c)| {
            let r = reference.functionals.get(name)?;
            let z = c.z_score(r);
            Some(FunctionalRow {
                name: name.clone(),
                chain: *c,
                reference: *r,
                z,
                pass: z <= gates.max_z,
            })
        })
        .collect();
    let marginals = marginals
        .iter()
        .map(|(name, a, b)| {
            let ks = ks_distance_weighted(
                &a.samples,
                a.log_weights.as_deref(),
                &b.samples,
                b.log_weights.as_deref(),
            );
            MarginalRow { name: name.clone(), ks, pass: ks <= gates.max_ks }
        })
        .collect();
    Ok(CompareReport { gates, functionals, marginals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded_rng(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn ar1(n: usize, rho: f64, seed: u64) -> Vec<f64> {
        let e = normals(n, seed);
        let mut x = vec![0.0; n];
        x[0] = e[0] / (1.0 - rho * rho).sqrt();
        for i in 1..n {
            x[i] = rho * x[i - 1] + e[i];
        }
        x
    }

    #[test]
    fn constant_series() {
        let e = ergodic_average(&[2.5; 400], 0, 20).unwrap();
        assert_eq!(e.value, 2.5);
        assert_eq!(e.std_error, 0.0);
        assert_eq!(iact(&[1.0; 2000]), 1.0);
    }

    #[test]
    fn iid_standard_error() {
        let x = normals(10_000, 1);
        let e = ergodic_average(&x, 0, 50).unwrap();
        let ratio = e.std_error / 0.01;
        assert!(ratio > 1.0 / 1.5 && ratio < 1.5, "{ratio}");
        let t = iact(&x);
        assert!((t - 1.0).abs() < 0.2, "{t}");
    }

    #[test]
    fn ar1_inflation() {
        let rho = 0.9;
        let x = ar1(200_000, rho, 2);
        let t = iact(&x);
        assert!((t - 19.0).abs() < 0.3 * 19.0, "{t}");
        let e = ergodic_average(&x, 0, 50).unwrap();
        // Marginal variance 1/(1-ρ²); i.i.d. SE would be sqrt(var/n).
        let iid = (1.0 / (1.0 - rho * rho) / x.len() as f64).sqrt();
        let inflation = e.std_error / iid;
        let expected = ((1.0 + rho) / (1.0 - rho)).sqrt();
        assert!((inflation / expected - 1.0).abs() < 0.35, "{inflation} vs {expected}");
    }

    #[test]
    fn too_short_rejected() {
        assert!(matches!(ergodic_average(&[1.0; 10], 0, 20), Err(Error::TooShort(_))));
        assert!(ergodic_average(&[1.0; 100], 0, 5).is_err());
    }

    #[test]
    fn ks_examples() {
        let a = normals(10_000, 3);
        assert_eq!(ks_distance(&a, &a), 0.0);
        let b: Vec<f64> = normals(10_000, 4).into_iter().map(|v| v + 1.0).collect();
        // Oracle: sup |Φ(x) - Φ(x - 1)| = 2Φ(½) - 1.
        let oracle = 0.382_924_922_548_026;
        assert!((ks_distance(&a, &b) - oracle).abs() < 0.03);
        let thinned: Vec<f64> = a.iter().step_by(2).copied().collect();
        assert!(ks_distance(&a, &thinned) <= 0.02);
    }

    #[test]
    fn ks_weighted_matches_duplication() {
        let a = [0.0, 1.0, 2.0];
        let lw = [0.0, 2f64.ln(), 0.0];
        let b = [0.0, 1.0, 1.0, 2.0];
        assert!(ks_distance_weighted(&a, Some(&lw), &b, None) < 1e-15);
    }

    #[test]
    fn batch_moments_match_direct() {
        let x = normals(4000, 5);
        let mut acc = BatchMoments::new(1, 100);
        for v in &x {
            acc.push(&[*v * 2.0 + 1.0]);
        }
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let direct = ergodic_average(&y, 0, 40).unwrap();
        let m = acc.mean_estimate(0);
        assert!((m.value - direct.value).abs() < 1e-12);
        assert!((m.std_error - direct.std_error).abs() < 1e-12);
        let v = acc.variance_estimate(0);
        let mu = direct.value;
        let var = y.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / y.len() as f64;
        assert!((v.value - var).abs() < 1e-10);
        assert!(v.std_error > 0.0);
    }

    #[test]
    fn split_half_report_passes() {
        let x = ar1(40_000, 0.5, 6);
        let (h1, h2) = x.split_at(20_000);
        let s = |h: &[f64]| {
            let e = ergodic_average(h, 0, 20).unwrap();
            Summary {
                nodes: vec![0.0, 1.0],
                functionals: [("mean".to_string(), e.estimate())].into_iter().collect(),
            }
        };
        let r = compare_report(
            &s(h1),
            &s(h2),
            &[("x".into(), Marginal::unweighted(h1.to_vec()), Marginal::unweighted(h2.to_vec()))],
            Gates::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
        let mut bad = s(h2);
        bad.nodes.push(2.0);
        assert!(compare_report(&s(h1), &bad, &[], Gates::default()).is_err());
    }
}
