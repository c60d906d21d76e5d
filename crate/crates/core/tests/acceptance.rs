//! Acceptance suite. Prints one line per criterion and exits non-zero if a
//! gating criterion fails. Run with `cargo test -p pathlangevin --test acceptance`.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use pathlangevin::diagnostics::{iact, ks_distance, ks_distance_weighted, Estimate};
use pathlangevin::model::{LogAlpha, MatrixSet, Observations, Potential, ProblemSpec, SmoothingMatrices};
use pathlangevin::operators::{assemble_precision, mean_path, solve_bvp};
use pathlangevin::oracle::{
    gaussian_reference_moments, importance_bridge, mala_oracle, rts_smoother, simulate_sde, MalaConfig,
    MalaMetric,
};
use pathlangevin::sampler::{preconditioned_noise, run_chain, ChainOutput, Functional};
use pathlangevin::{seeded_rng, Grid, Path, SamplerConfig, Scheme, TargetMeasure};
use rand::Rng;

struct Outcome {
    pass: bool,
    gating: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, gating: true, detail: detail.into() }
    }

    fn report(detail: impl Into<String>) -> Self {
        Self { pass: true, gating: false, detail: detail.into() }
    }
}

fn one() -> DMatrix<f64> {
    DMatrix::identity(1, 1)
}

fn quad(q: f64) -> Potential {
    Potential::quadratic(DMatrix::from_element(1, 1, q)).unwrap()
}

fn well() -> Potential {
    Potential::double_well(1, 1.0, 1.0).unwrap()
}

fn scalar_matrices(a: f64) -> MatrixSet {
    MatrixSet::new(DMatrix::from_element(1, 1, a), one()).unwrap()
}

fn chain(target: &TargetMeasure, scheme: Scheme, delta: f64, burn_in: u64, recorded: u64, seed: u64, f: &[Functional]) -> ChainOutput {
    let mut c = SamplerConfig::new(scheme, delta, burn_in + recorded);
    c.burn_in = burn_in;
    run_chain(target, &c, seed, None, f).unwrap()
}

const CN: Scheme = Scheme::SemiImplicit { theta: 0.5 };

fn criterion_1() -> Outcome {
    let grid = Grid::new(32).unwrap();
    let spec = ProblemSpec::bridge(MatrixSet::standard(1).unwrap(), Potential::zero(1), vec![0.0], vec![0.0]).unwrap();
    let op = assemble_precision(&spec, &grid).unwrap();
    let inv = op.lambda().to_dense().try_inverse().unwrap();
    let mut err = 0.0f64;
    for i in 0..31 {
        for j in i..31 {
            err = err.max((inv[(i, j)] - grid.node(i + 1) * (1.0 - grid.node(j + 1))).abs());
        }
    }
    let target = TargetMeasure::new(spec, &grid).unwrap();
    let out = chain(&target, CN, 0.05, 10_000, 100_000, 11, &[]);
    let v = out.node_variance(16, 0);
    let z = (v.value - 0.25).abs() / v.std_error;
    Outcome::new(
        err <= 1e-12 && z <= 4.0,
        format!("max |Λ⁻¹ - u(1-u)| = {err:.2e}; Var(x(½)) = {:.4} ± {:.4} (z = {z:.2})", v.value, v.std_error),
    )
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, b| a.max(b.abs()))
}

/// Relative sup error of the analytic gradient against central differences.
fn gradient_error(target: &TargetMeasure, path: &Path) -> f64 {
    let g = target.target_grad(path).unwrap();
    let layout = target.layout();
    let x0 = layout.restrict(path.values()).to_vec();
    let mut worst = 0.0f64;
    for i in 0..x0.len() {
        let h = 1e-5 * (1.0 + x0[i].abs());
        let mut x = x0.clone();
        x[i] = x0[i] + h;
        let plus = target.target_log_density(&layout.expand(target.grid(), &x)).unwrap();
        x[i] = x0[i] - h;
        let minus = target.target_log_density(&layout.expand(target.grid(), &x)).unwrap();
        worst = worst.max(((plus - minus) / (2.0 * h) - g[i]).abs());
    }
    worst / (1.0 + max_abs(&g))
}

fn criterion_2() -> Outcome {
    let grid = Grid::new(16).unwrap();
    let a = DMatrix::from_row_slice(2, 2, &[-0.5, 0.8, -0.3, -1.0]);
    let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.4, 0.7]);
    let v = Potential::double_well(2, 1.0, 1.5).unwrap();
    let m = MatrixSet::new(a, b).unwrap();
    let obs = Observations::from_increments(&grid, 1, (0..16).map(|i| 0.05 * (i as f64).sin()).collect()).unwrap();
    let specs = [
        ("free path", ProblemSpec::free_path(m.clone(), v.clone(), vec![0.3, -0.2]).unwrap()),
        ("bridge", ProblemSpec::bridge(m, v.clone(), vec![-1.0, 0.5], vec![1.0, 0.2]).unwrap()),
        (
            "smoothing",
            ProblemSpec::smoothing(
                SmoothingMatrices::new(
                    DMatrix::from_row_slice(1, 2, &[1.0, -0.5]),
                    DMatrix::from_row_slice(2, 2, &[0.8, 0.1, 0.0, 1.2]),
                    DMatrix::from_element(1, 1, 0.3),
                )
                .unwrap(),
                v,
                LogAlpha::Stationary,
                obs,
            )
            .unwrap(),
        ),
    ];
    let mut rng = seeded_rng(2);
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, spec) in specs {
        let target = TargetMeasure::new(spec, &grid).unwrap();
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let vals: Vec<f64> = (0..grid.nodes() * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = target.layout().expand(&grid, target.layout().restrict(&vals));
            worst = worst.max(gradient_error(&target, &p));
        }
        pass &= worst <= 1e-6;
        parts.push(format!("{name} {worst:.1e}"));
    }
    Outcome::new(pass, format!("relative sup error: {}", parts.join(", ")))
}

/// Largest z-score of node means and variances against exact moments.
fn gaussian_z(out: &ChainOutput, target: &TargetMeasure) -> f64 {
    let exact = gaussian_reference_moments(target).unwrap();
    let layout = target.layout();
    let mut worst = 0.0f64;
    for m in layout.first()..=layout.last() {
        let mean = Estimate::new(exact.mean.node(m)[0], 0.0);
        let var = Estimate::new(exact.node_variance(m, 0), 0.0);
        worst = worst.max(out.node_mean(m, 0).z_score(&mean));
        worst = worst.max(out.node_variance(m, 0).z_score(&var));
    }
    worst
}

fn gaussian_benchmarks() -> [(&'static str, ProblemSpec); 2] {
    [
        ("free path", ProblemSpec::free_path(scalar_matrices(-0.5), quad(1.0), vec![4.0]).unwrap()),
        ("OU bridge", ProblemSpec::bridge(scalar_matrices(0.0), quad(1.0), vec![4.0], vec![-3.0]).unwrap()),
    ]
}

fn criterion_3_with(corruption: Option<f64>) -> Vec<(&'static str, f64)> {
    let grid = Grid::new(16).unwrap();
    gaussian_benchmarks()
        .into_iter()
        .enumerate()
        .map(|(i, (name, spec))| {
            let exact = TargetMeasure::new(spec.clone(), &grid).unwrap();
            let sampled = match corruption {
                None => exact.clone(),
                Some(c) => {
                    let op = assemble_precision(&spec, &grid).unwrap().corrupted(c);
                    TargetMeasure::from_operator(spec, op).unwrap()
                }
            };
            let out = chain(&sampled, CN, 0.01, 10_000, 100_000, 30 + i as u64, &[]);
            (name, gaussian_z(&out, &exact))
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let r = criterion_3_with(None);
    let pass = r.iter().all(|(_, z)| *z <= 4.0);
    let d: Vec<String> = r.iter().map(|(n, z)| format!("{n} max z = {z:.2}")).collect();
    Outcome::new(pass, d.join(", "))
}

fn criterion_9() -> Outcome {
    let du = 1.0 / 16.0;
    let r = criterion_3_with(Some(1.0 + du));
    let pass = r.iter().all(|(_, z)| *z > 10.0);
    let d: Vec<String> = r.iter().map(|(n, z)| format!("{n} max z = {z:.1}")).collect();
    Outcome::new(pass, format!("Λ scaled by 1 + du: {}", d.join(", ")))
}

fn scalar_smoothing(b22: f64) -> SmoothingMatrices {
    SmoothingMatrices::new(one(), one(), DMatrix::from_element(1, 1, b22)).unwrap()
}

/// Smoothing problem with observations simulated from its own generative model.
fn simulated_smoothing(grid: &Grid, potential: Potential, log_alpha: LogAlpha, b22: f64, seed: u64) -> ProblemSpec {
    let blank = Observations::zeros(grid, 1);
    let proto = ProblemSpec::smoothing(scalar_smoothing(b22), potential.clone(), log_alpha.clone(), blank).unwrap();
    let sim = simulate_sde(&proto, grid, 20, &mut seeded_rng(seed)).unwrap();
    ProblemSpec::smoothing(scalar_smoothing(b22), potential, log_alpha, sim.observations.unwrap()).unwrap()
}

fn well_bridge(m: usize) -> TargetMeasure {
    let spec = ProblemSpec::bridge(scalar_matrices(0.0), well(), vec![-1.0], vec![1.0]).unwrap();
    TargetMeasure::new(spec, &Grid::new(m).unwrap()).unwrap()
}

fn criterion_4() -> Outcome {
    let m = 32;
    let target = well_bridge(m);
    let mid = m / 2;
    let f = [Functional::node_value(mid, 0)];
    let out = chain(&target, Scheme::Preconditioned, 0.1, 5_000, 400_000, 41, &f);
    let series = &out.functional_series[0];
    let n_eff = series.len() as f64 / iact(series);

    let ens = importance_bridge(&target, 100_000, &mut seeded_rng(42)).unwrap();
    let marg = ens.marginal(mid, 0);
    let mala_cfg = MalaConfig { delta: 0.3, steps: 1_000_000, burn_in: 10_000, thin: 10, metric: MalaMetric::Prior };
    let mala = mala_oracle(&target, &mala_cfg, &f, &mut seeded_rng(43)).unwrap();
    let ms = &mala.functional_series[0];

    let ks_ci = ks_distance_weighted(series, None, &marg, Some(ens.log_weights()));
    let ks_cm = ks_distance(series, ms);
    let ks_im = ks_distance_weighted(ms, None, &marg, Some(ens.log_weights()));
    let pass = n_eff >= 1e3 && ks_ci <= 0.05 && ks_cm <= 0.05 && ks_im <= 0.05;
    Outcome::new(
        pass,
        format!(
            "n_eff = {n_eff:.0}, importance n_eff = {:.0}, MALA acceptance {:.2}; KS chain/importance {ks_ci:.4}, chain/MALA {ks_cm:.4}, importance/MALA {ks_im:.4}",
            ens.effective_size(),
            mala.acceptance_rate
        ),
    )
}

fn quartile_functionals(m: usize) -> Vec<Functional> {
    vec![Functional::node_value(m / 4, 0), Functional::node_value(m / 2, 0), Functional::node_value(3 * m / 4, 0)]
}

/// Largest joint z-score of node means and variances of two chains.
fn moments_z(a: &ChainOutput, b: &ChainOutput, layout: &pathlangevin::operators::Layout) -> f64 {
    let mut worst = 0.0f64;
    for m in layout.first()..=layout.last() {
        for k in 0..a.dim {
            worst = worst.max(a.node_mean(m, k).z_score(&b.node_mean(m, k)));
            worst = worst.max(a.node_variance(m, k).z_score(&b.node_variance(m, k)));
        }
    }
    worst
}

/// Largest joint z-score over functional ergodic averages of two chains.
fn chains_z(a: &ChainOutput, b: &ChainOutput) -> f64 {
    (0..a.functional_names.len())
        .map(|i| {
            let ea = a.functional_estimate(i).unwrap().estimate();
            let eb = b.functional_estimate(i).unwrap().estimate();
            ea.z_score(&eb)
        })
        .fold(0.0, f64::max)
}

fn criterion_5() -> Outcome {
    let m = 16;
    let grid = Grid::new(m).unwrap();
    let smoothing = simulated_smoothing(&grid, well(), LogAlpha::Stationary, 0.5, 51);
    let benches = [
        ("free path", ProblemSpec::free_path(scalar_matrices(0.0), well(), vec![-1.0]).unwrap()),
        ("bridge", ProblemSpec::bridge(scalar_matrices(0.0), well(), vec![-1.0], vec![1.0]).unwrap()),
        ("smoothing", smoothing),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, (name, spec)) in benches.into_iter().enumerate() {
        let seed = 500 + 10 * i as u64;
        let target = TargetMeasure::new(spec.clone(), &grid).unwrap();
        let cn = chain(&target, CN, 0.02, 5_000, 300_000, seed, &[]);
        let is_smoothing = spec.kind().name() == "smoothing";
        let epsilons: &[f64] = if is_smoothing { &[0.5, 1.0, 2.0] } else { &[1.0] };
        // The explicit drift sees Λ0⁻¹, which is wide along the constant mode when ε is small.
        let pc_delta = if is_smoothing { 0.005 } else { 0.02 };
        for (j, eps) in epsilons.iter().enumerate() {
            let t = TargetMeasure::with_epsilon(spec.clone(), &grid, *eps).unwrap();
            let pc = chain(&t, Scheme::Preconditioned, pc_delta, 5_000, 300_000, seed + 1 + j as u64, &[]);
            assert!(!cn.diverged() && !pc.diverged(), "{name}: {:?} {:?}", cn.divergence, pc.divergence);
            let z = moments_z(&cn, &pc, t.layout());
            pass &= z <= 3.0;
            if epsilons.len() > 1 {
                parts.push(format!("{name} ε={eps} z = {z:.2}"));
            } else {
                parts.push(format!("{name} z = {z:.2}"));
            }
        }
    }
    Outcome::new(pass, format!("max joint z: {}", parts.join(", ")))
}

fn rel_l2(a: &Path, b: &Path) -> f64 {
    let num: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.values().iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn criterion_6() -> Outcome {
    let m = 32;
    let grid = Grid::new(m).unwrap();
    let alpha = LogAlpha::Gaussian { mean: vec![2.0], precision: DMatrix::from_element(1, 1, 4.0) };
    let spec = simulated_smoothing(&grid, quad(1.0), alpha, 0.5, 61);
    let target = TargetMeasure::new(spec.clone(), &grid).unwrap();
    let out = chain(&target, CN, 0.05, 5_000, 200_000, 62, &[]);
    let chain_mean = out.mean_path();
    let mode = mean_path(&spec, &grid).unwrap();
    let rts = rts_smoother(&spec, &grid).unwrap().mean;
    let e1 = rel_l2(&chain_mean, &mode);
    let e2 = rel_l2(&chain_mean, &rts);
    let e3 = rel_l2(&mode, &rts);
    let exact = gaussian_reference_moments(&target).unwrap();
    let mut z = 0.0f64;
    for node in 0..=m {
        let v = Estimate::new(exact.node_variance(node, 0), 0.0);
        z = z.max(out.node_variance(node, 0).z_score(&v));
    }
    let pass = e1.max(e2).max(e3) <= 0.02 && z <= 4.0;
    Outcome::new(
        pass,
        format!("relative L2: chain/mean_path {e1:.4}, chain/smoother {e2:.4}, mean_path/smoother {e3:.4}; variance max z = {z:.2}"),
    )
}

fn criterion_7() -> Outcome {
    let grid = Grid::new(8).unwrap();
    let spec = simulated_smoothing(&grid, well(), LogAlpha::Stationary, 0.5, 71);
    let op = assemble_precision(&spec, &grid).unwrap();
    let factor = op.lambda0().cholesky().unwrap();
    let target_cov = op.lambda0().to_dense().try_inverse().unwrap();
    let delta: f64 = 0.3;
    let scale = -(-2.0 * delta).exp_m1();
    let n = op.size();
    let draws = 100_000;
    let mut rng = seeded_rng(72);
    let mut s1 = DMatrix::<f64>::zeros(n, n);
    let mut s2 = DMatrix::<f64>::zeros(n, n);
    for _ in 0..draws {
        let z = preconditioned_noise(&factor, delta, &mut rng);
        for i in 0..n {
            for j in i..n {
                let p = z[i] * z[j];
                s1[(i, j)] += p;
                s2[(i, j)] += p * p;
            }
        }
    }
    let nf = draws as f64;
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            let mean = s1[(i, j)] / nf;
            let sd = (s2[(i, j)] / nf - mean * mean).max(0.0).sqrt();
            let z = (mean - scale * target_cov[(i, j)]).abs() / (sd / nf.sqrt());
            worst = worst.max(z);
        }
    }
    Outcome::new(worst <= 4.0, format!("{} covariance entries, max z = {worst:.2}", n * (n + 1) / 2))
}

fn criterion_8() -> Outcome {
    let m = 32;
    let grid = Grid::new(m).unwrap();
    let target = well_bridge(m);
    let mut f = quartile_functionals(m);
    f.push(Functional::time_average(&grid, 0));
    f.push(Functional::time_average_sq(&grid, 0));
    let mean = assemble_precision(target.spec(), &grid).and_then(|op| solve_bvp(&op, &vec![0.0; op.size()])).unwrap();
    let mut shifted = mean.clone();
    shifted.values_mut().iter_mut().for_each(|v| *v += 5.0);
    // The shifted start sits where ∇Φ is very stiff; δ is sized for stability there.
    let mut cfg = SamplerConfig::new(Scheme::Preconditioned, 0.004, 2_020_000);
    cfg.burn_in = 20_000;
    let a = run_chain(&target, &cfg, 81, Some(&mean), &f).unwrap();
    let b = run_chain(&target, &cfg, 82, Some(&shifted), &f).unwrap();
    let z = if a.diverged() || b.diverged() { f64::INFINITY } else { chains_z(&a, &b) };
    Outcome::new(z <= 3.0, format!("5 functionals from m and m + 5, max joint z = {z:.2}"))
}

fn criterion_10() -> Outcome {
    let mut rows = Vec::new();
    let mut prev: Option<(f64, f64)> = None;
    let mut diffs = Vec::new();
    for (i, m) in [16usize, 32, 64].into_iter().enumerate() {
        let target = well_bridge(m);
        let ens = importance_bridge(&target, 1_000_000, &mut seeded_rng(100 + i as u64)).unwrap();
        let mean = ens.node_mean(m / 2, 0);
        let var = ens.node_variance(m / 2, 0);
        let mut row = format!("M={m}: mean {:.4} ± {:.4}, var {:.4} ± {:.4}", mean.value, mean.std_error, var.value, var.std_error);
        if let Some((pm, pv)) = prev {
            row.push_str(&format!(" (Δmean {:.4}, Δvar {:.4})", mean.value - pm, var.value - pv));
            diffs.push(((mean.value - pm).abs(), (var.value - pv).abs()));
        }
        prev = Some((mean.value, var.value));
        rows.push(row);
    }
    let monotone = diffs.windows(2).all(|w| w[1].0 <= w[0].0 && w[1].1 <= w[0].1);
    Outcome::report(format!("{}; Cauchy differences monotone: {monotone}", rows.join("; ")))
}

fn main() {
    let criteria: Vec<(&str, Duration, fn() -> Outcome)> = vec![
        ("1", Duration::from_secs(10), criterion_1),
        ("2", Duration::from_secs(1), criterion_2),
        ("3", Duration::from_secs(30), criterion_3),
        ("4", Duration::from_secs(300), criterion_4),
        ("5", Duration::from_secs(300), criterion_5),
        ("6", Duration::from_secs(60), criterion_6),
        ("7", Duration::from_secs(10), criterion_7),
        ("8", Duration::from_secs(120), criterion_8),
        ("9", Duration::from_secs(30), criterion_9),
        ("10", Duration::from_secs(120), criterion_10),
    ];
    let mut failed = 0;
    for (name, budget, f) in criteria {
        let t = Instant::now();
        let o = f();
        let el = t.elapsed();
        let pass = o.pass && el <= budget;
        if !pass && o.gating {
            failed += 1;
        }
        let status = match (o.gating, pass) {
            (false, _) => "REPORT",
            (true, true) => "PASS",
            (true, false) => "FAIL",
        };
        println!(
            "criterion {name}: {status} [{:.1}s / {}s] {}",
            el.as_secs_f64(),
            budget.as_secs(),
            o.detail
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
