//! Native entry points behind the browser bindings.

use nalgebra::DMatrix;
use pathlangevin::oracle::{importance_bridge, simulate_sde};
use pathlangevin::sampler::{run_chain, Functional};
use pathlangevin::model::SmoothingMatrices;
use pathlangevin::{
    seeded_rng, Grid, LogAlpha, MatrixSet, Observations, Potential, ProblemSpec, Result, SamplerConfig, Scheme,
    TargetMeasure,
};

const CN: Scheme = Scheme::SemiImplicit { theta: 0.5 };

/// Histogram range for the midpoint marginal.
pub const HIST_RANGE: (f64, f64) = (-2.5, 2.5);

fn well_bridge(intervals: usize, start: f64, end: f64, barrier: f64) -> Result<TargetMeasure> {
    let matrices = MatrixSet::standard(1)?;
    let spec = ProblemSpec::bridge(matrices, Potential::double_well(1, 1.0, barrier)?, vec![start], vec![end])?;
    TargetMeasure::new(spec, &Grid::new(intervals)?)
}

fn config(grid: &Grid, scheme: Scheme, steps: u64, kept: u64) -> SamplerConfig {
    let mut c = SamplerConfig::new(scheme, SamplerConfig::default_delta(scheme, grid), steps);
    c.burn_in = steps / 10;
    c.thin = ((steps - c.burn_in) / kept).max(1);
    c
}

/// `paths` thinned chain states of a double-well bridge, flattened node by node.
pub fn bridge_paths(intervals: usize, start: f64, end: f64, barrier: f64, steps: u64, paths: u64, seed: u64) -> Result<Vec<f64>> {
    let target = well_bridge(intervals, start, end, barrier)?;
    let mut cfg = config(target.grid(), CN, steps, paths);
    cfg.record_paths = true;
    let out = run_chain(&target, &cfg, seed, None, &[])?;
    Ok(out.samples.iter().rev().take(paths as usize).flat_map(|p| p.values().to_vec()).collect())
}

fn histogram(values: &[f64], weights: &[f64], bins: usize) -> Vec<f64> {
    let (lo, hi) = HIST_RANGE;
    let width = (hi - lo) / bins as f64;
    let mut h = vec![0.0; bins];
    for (x, w) in values.iter().zip(weights) {
        let b = ((x - lo) / width).floor();
        if b >= 0.0 && (b as usize) < bins {
            h[b as usize] += w;
        }
    }
    let total: f64 = weights.iter().sum();
    h.iter().map(|v| v / (total * width)).collect()
}

/// Midpoint densities on `bins` cells of [`HIST_RANGE`]: the chain's
/// histogram followed by the importance-sampling reference.
pub fn midpoint_histogram(intervals: usize, start: f64, end: f64, barrier: f64, steps: u64, bins: usize, seed: u64) -> Result<Vec<f64>> {
    let target = well_bridge(intervals, start, end, barrier)?;
    let mid = intervals / 2;
    let cfg = config(target.grid(), CN, steps, 20_000);
    let out = run_chain(&target, &cfg, seed, None, &[Functional::node_value(mid, 0)])?;
    let series = &out.functional_series[0];
    let mut h = histogram(series, &vec![1.0; series.len()], bins);
    let ens = importance_bridge(&target, 20_000, &mut seeded_rng(seed ^ 0x9e37_79b9))?;
    let w = pathlangevin::diagnostics::normalized_weights(ens.len(), Some(ens.log_weights()));
    h.extend(histogram(&ens.marginal(mid, 0), &w, bins));
    Ok(h)
}

/// Smoothing of a simulated double-well signal observed in noise. Returns
/// four node series: the hidden signal, the observation path `Y`, and the
/// posterior mean and standard deviation.
pub fn smoothing_posterior(intervals: usize, noise: f64, steps: u64, seed: u64) -> Result<Vec<f64>> {
    let grid = Grid::new(intervals)?;
    let one = || DMatrix::from_element(1, 1, 1.0);
    let matrices = || SmoothingMatrices::new(one(), one(), DMatrix::from_element(1, 1, noise));
    let well = Potential::double_well(1, 1.0, 1.0)?;
    let proto = ProblemSpec::smoothing(matrices()?, well.clone(), LogAlpha::Stationary, Observations::zeros(&grid, 1))?;
    let sim = simulate_sde(&proto, &grid, 20, &mut seeded_rng(seed))?;
    let obs = sim.observations.expect("smoothing simulates observations");
    let spec = ProblemSpec::smoothing(matrices()?, well, LogAlpha::Stationary, obs.clone())?;
    let target = TargetMeasure::new(spec, &grid)?;
    let cfg = config(&grid, CN, steps, 1_000);
    let out = run_chain(&target, &cfg, seed.wrapping_add(1), None, &[])?;

    let nodes = grid.nodes();
    let mut series = sim.path.values().to_vec();
    let mut y = 0.0;
    series.push(0.0);
    for c in 0..obs.cells() {
        y += obs.increment(c)[0];
        series.push(y);
    }
    series.extend((0..nodes).map(|m| out.node_mean(m, 0).value));
    series.extend((0..nodes).map(|m| out.node_variance(m, 0).value.max(0.0).sqrt()));
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bridge_paths_are_pinned() {
        let v = bridge_paths(16, -1.0, 1.0, 1.0, 2_000, 5, 1).unwrap();
        assert_eq!(v.len(), 5 * 17);
        for p in v.chunks(17) {
            assert_eq!((p[0], p[16]), (-1.0, 1.0));
        }
    }

    #[test]
    fn histograms_are_densities() {
        let bins = 25;
        let h = midpoint_histogram(16, -1.0, 1.0, 1.0, 20_000, bins, 2).unwrap();
        let width = (HIST_RANGE.1 - HIST_RANGE.0) / bins as f64;
        for half in h.chunks(bins) {
            let mass: f64 = half.iter().sum::<f64>() * width;
            assert!(mass > 0.95 && mass <= 1.0 + 1e-9, "{mass}");
        }
    }

    #[test]
    fn smoothing_series_have_node_length() {
        let v = smoothing_posterior(32, 0.3, 5_000, 3).unwrap();
        assert_eq!(v.len(), 4 * 33);
        assert!(v[3 * 33..].iter().all(|s| s.is_finite() && *s >= 0.0));
    }
}
