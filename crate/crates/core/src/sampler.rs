//! Langevin dynamics whose stationary law is the discrete target.
//!
//! Two integrators are provided. The semi-implicit θ-scheme integrates
//! `dx = (-Λx + g + ∇Û(x)) dτ + √2 dW` with `Λ` implicit and `∇Û` explicit;
//! for `θ = ½` it leaves the Gaussian part invariant for every step size.
//! The preconditioned scheme integrates `dx = (-x + y(x)) dτ + √2 dW̃`, with
//! `y = Λ0⁻¹(g + ∇Û(x) - Λ1x)` frozen over each step and `W̃` a Wiener
//! process with covariance `Λ0⁻¹`, so the linear part is solved exactly.

use std::fmt;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::diagnostics::{ergodic_average, BatchMoments, ErgodicEstimate, Estimate, Summary};
use crate::linalg::CholeskyFactor;
use crate::measure::{GradWorkspace, TargetMeasure};
use crate::model::{Grid, Path, ProblemKind};
use crate::operators::{posterior_mode, sample_from_precision_into, solve_bvp};
use crate::{seeded_rng, Error, Result, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scheme {
    /// θ-scheme in the precision operator; `theta = ½` is Crank–Nicolson.
    SemiImplicit { theta: f64 },
    /// Exact Ornstein–Uhlenbeck step around the frozen preconditioner solve.
    Preconditioned,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::SemiImplicit { .. } => "semi_implicit",
            Scheme::Preconditioned => "preconditioned",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub scheme: Scheme,
    /// Time step δ.
    pub delta: f64,
    /// Steps discarded before any statistic is recorded.
    pub burn_in: u64,
    /// Total steps, burn-in included.
    pub steps: u64,
    /// Record functionals (and paths) every `thin` post-burn-in steps.
    pub thin: u64,
    /// Abort when `‖x‖∞` exceeds this; `None` uses `10³(1 + ‖m‖∞)`.
    pub divergence_threshold: Option<f64>,
    /// Number of batches for the node-moment error bars.
    pub batches: usize,
    /// Keep the thinned paths in memory.
    pub record_paths: bool,
}

impl SamplerConfig {
    pub fn new(scheme: Scheme, delta: f64, steps: u64) -> Self {
        Self {
            scheme,
            delta,
            burn_in: steps / 10,
            steps,
            thin: 1,
            divergence_threshold: None,
            batches: 40,
            record_paths: false,
        }
    }

    /// Default step: `0.1·du` for the semi-implicit scheme, `0.1` otherwise.
    pub fn default_delta(scheme: Scheme, grid: &Grid) -> f64 {
        match scheme {
            Scheme::SemiImplicit { .. } => 0.1 * grid.du(),
            Scheme::Preconditioned => 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::InvalidParameter(format!("delta must be positive, got {}", self.delta)));
        }
        if let Scheme::SemiImplicit { theta } = self.scheme {
            if !(0.0..=1.0).contains(&theta) {
                return Err(Error::InvalidParameter(format!("theta must lie in [0, 1], got {theta}")));
            }
        }
        if self.steps > 0 && self.burn_in >= self.steps {
            return Err(Error::InvalidParameter(format!(
                "burn-in ({}) must be smaller than the total steps ({})",
                self.burn_in, self.steps
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidParameter("thin must be at least 1".into()));
        }
        if self.batches == 0 {
            return Err(Error::InvalidParameter("batches must be at least 1".into()));
        }
        if let Some(r) = self.divergence_threshold {
            if !(r > 0.0) {
                return Err(Error::InvalidParameter("divergence threshold must be positive".into()));
            }
        }
        Ok(())
    }
}

/// State of one chain: free node values, last preconditioner solve, random
/// stream and bookkeeping.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub x: Vec<f64>,
    pub y: Option<Vec<f64>>,
    pub step: u64,
    pub rng: Rng,
    /// Largest `‖x‖∞` seen so far.
    pub watermark: f64,
}

impl ChainState {
    pub fn new(x: Vec<f64>, seed: u64) -> Self {
        let watermark = sup_norm(&x);
        Self { x, y: None, step: 0, rng: seeded_rng(seed), watermark }
    }
}

fn sup_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |a, b| if b.is_nan() { f64::NAN } else { a.max(b.abs()) })
}

fn fill_normals(rng: &mut Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

/// `y = Λ0⁻¹(g + ∇Û(x) - Λ1x)` given the factor of `Λ0`. The drift of the
/// preconditioned dynamics is `y - x = Λ0⁻¹∇log π(x)`.
pub fn solve_preconditioner(target: &TargetMeasure, factor0: &CholeskyFactor, x: &[f64]) -> Vec<f64> {
    let mut ws = target.workspace();
    let mut y = vec![0.0; x.len()];
    let mut tmp = vec![0.0; x.len()];
    precond_rhs(target, x, &mut y, &mut tmp, &mut ws);
    factor0.solve_in_place(&mut y);
    y
}

fn precond_rhs(target: &TargetMeasure, x: &[f64], out: &mut [f64], tmp: &mut [f64], ws: &mut GradWorkspace) {
    target.grad_log_u_into(x, out, ws);
    target.operator().lambda1().mul_vec_into(x, tmp);
    for ((o, g), l) in out.iter_mut().zip(target.operator().forcing()).zip(tmp.iter()) {
        *o += g - l;
    }
}

/// Draws `√(1 - e^{-2δ}) z` with `z ~ N(0, Λ0⁻¹)`, the noise of one
/// preconditioned step.
pub fn preconditioned_noise(factor0: &CholeskyFactor, delta: f64, rng: &mut Rng) -> Vec<f64> {
    let mut z = vec![0.0; factor0.size()];
    sample_from_precision_into(factor0, rng, &mut z);
    let s = (-(-2.0 * delta).exp_m1()).sqrt();
    z.iter_mut().for_each(|v| *v *= s);
    z
}

/// A stepper bound to one target, scheme and step size. Factorizations and
/// buffers are set up once.
pub struct Integrator<'a> {
    target: &'a TargetMeasure,
    scheme: Scheme,
    delta: f64,
    factor: CholeskyFactor,
    ws: GradWorkspace,
    buf: Vec<f64>,
    tmp: Vec<f64>,
    noise: Vec<f64>,
    threshold: f64,
}

impl fmt::Debug for Integrator<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Integrator")
            .field("scheme", &self.scheme)
            .field("delta", &self.delta)
            .field("threshold", &self.threshold)
            .finish()
    }
}

impl<'a> Integrator<'a> {
    pub fn new(target: &'a TargetMeasure, scheme: Scheme, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::InvalidParameter(format!("delta must be positive, got {delta}")));
        }
        let op = target.operator();
        let factor = match scheme {
            Scheme::SemiImplicit { theta } => {
                if !(0.0..=1.0).contains(&theta) {
                    return Err(Error::InvalidParameter(format!("theta must lie in [0, 1], got {theta}")));
                }
                op.lambda().shifted(1.0, delta * theta).cholesky()?
            }
            Scheme::Preconditioned => op.lambda0().cholesky()?,
        };
        let n = target.size();
        Ok(Self {
            target,
            scheme,
            delta,
            factor,
            ws: target.workspace(),
            buf: vec![0.0; n],
            tmp: vec![0.0; n],
            noise: vec![0.0; n],
            threshold: f64::INFINITY,
        })
    }

    /// Sets the `‖x‖∞` level at which a step reports divergence.
    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// The factor of `I + δθΛ` or of `Λ0`.
    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    pub fn step(&mut self, state: &mut ChainState) -> Result<()> {
        let op = self.target.operator();
        let delta = self.delta;
        match self.scheme {
            Scheme::SemiImplicit { theta } => {
                // rhs = x - δ(1-θ)Λx + δ(g + ∇Û(x)) + √(2δ)ξ
                self.target.grad_log_u_into(&state.x, &mut self.buf, &mut self.ws);
                op.lambda().mul_vec_into(&state.x, &mut self.tmp);
                fill_normals(&mut state.rng, &mut self.noise);
                let s = (2.0 * delta).sqrt();
                let explicit = delta * (1.0 - theta);
                for i in 0..self.buf.len() {
                    self.buf[i] = state.x[i] - explicit * self.tmp[i]
                        + delta * (op.forcing()[i] + self.buf[i])
                        + s * self.noise[i];
                }
                self.factor.solve_in_place(&mut self.buf);
                state.x.copy_from_slice(&self.buf);
            }
            Scheme::Preconditioned => {
                precond_rhs(self.target, &state.x, &mut self.buf, &mut self.tmp, &mut self.ws);
                self.factor.solve_in_place(&mut self.buf);
                sample_from_precision_into(&self.factor, &mut state.rng, &mut self.noise);
                let decay = (-delta).exp();
                let s = (-(-2.0 * delta).exp_m1()).sqrt();
                for i in 0..self.buf.len() {
                    let y = self.buf[i];
                    state.x[i] = y + decay * (state.x[i] - y) + s * self.noise[i];
                }
                match &mut state.y {
                    Some(y) => y.copy_from_slice(&self.buf),
                    None => state.y = Some(self.buf.clone()),
                }
            }
        }
        state.step += 1;
        let sup = sup_norm(&state.x);
        if !(sup <= self.threshold) {
            return Err(Error::Diverged { step: state.step, sup_norm: sup, threshold: self.threshold });
        }
        state.watermark = state.watermark.max(sup);
        Ok(())
    }
}

/// One θ-scheme step. Builds the factorization on every call; loops should
/// use an [`Integrator`].
pub fn step_semi_implicit(state: &mut ChainState, target: &TargetMeasure, delta: f64, theta: f64) -> Result<()> {
    Integrator::new(target, Scheme::SemiImplicit { theta }, delta)?.step(state)
}

/// One preconditioned step. Builds the factorization on every call; loops
/// should use an [`Integrator`].
pub fn step_preconditioned(state: &mut ChainState, target: &TargetMeasure, delta: f64) -> Result<()> {
    Integrator::new(target, Scheme::Preconditioned, delta)?.step(state)
}

/// A scalar function of a path, monitored along a chain.
#[derive(Clone)]
pub struct Functional {
    name: String,
    f: Arc<dyn Fn(&Path) -> f64 + Send + Sync>,
}

impl fmt::Debug for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Functional").field("name", &self.name).finish()
    }
}

impl Functional {
    pub fn new(name: impl Into<String>, f: impl Fn(&Path) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), f: Arc::new(f) }
    }

    /// Component `k` at grid node `m`.
    pub fn node_value(m: usize, k: usize) -> Self {
        Self::new(format!("x[{m}][{k}]"), move |p: &Path| p.node(m)[k])
    }

    /// Trapezoidal `∫ x_k(u) du`.
    pub fn time_average(grid: &Grid, k: usize) -> Self {
        let w = grid.weights();
        Self::new(format!("int_x[{k}]"), move |p: &Path| {
            w.iter().enumerate().map(|(m, wm)| wm * p.node(m)[k]).sum()
        })
    }

    /// Trapezoidal `∫ x_k(u)² du`.
    pub fn time_average_sq(grid: &Grid, k: usize) -> Self {
        let w = grid.weights();
        Self::new(format!("int_x2[{k}]"), move |p: &Path| {
            w.iter().enumerate().map(|(m, wm)| wm * p.node(m)[k].powi(2)).sum()
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn eval(&self, p: &Path) -> f64 {
        (self.f)(p)
    }
}

/// Where and why a chain stopped early.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Divergence {
    pub step: u64,
    pub sup_norm: f64,
    pub threshold: f64,
}

/// Statistics and samples from one chain.
#[derive(Clone, Debug)]
pub struct ChainOutput {
    pub grid: Grid,
    pub dim: usize,
    pub seed: u64,
    pub config: SamplerConfig,
    pub initial: Path,
    pub final_state: ChainState,
    /// Online moments of every node value, post burn-in.
    pub moments: BatchMoments,
    pub functional_names: Vec<String>,
    /// One series per functional, at the thinned post-burn-in steps.
    pub functional_series: Vec<Vec<f64>>,
    /// Thinned paths when [`SamplerConfig::record_paths`] is set.
    pub samples: Vec<Path>,
    /// Step index of each thinned sample.
    pub sample_steps: Vec<u64>,
    pub divergence: Option<Divergence>,
}

impl ChainOutput {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    pub fn recorded_steps(&self) -> u64 {
        self.moments.count()
    }

    fn index(&self, m: usize, k: usize) -> usize {
        m * self.dim + k
    }

    /// Ergodic mean of component `k` at node `m`; the initial value when no
    /// step was recorded.
    pub fn node_mean(&self, m: usize, k: usize) -> Estimate {
        if self.moments.count() == 0 {
            return Estimate::new(self.initial.node(m)[k], f64::NAN);
        }
        self.moments.mean_estimate(self.index(m, k))
    }

    pub fn node_variance(&self, m: usize, k: usize) -> Estimate {
        if self.moments.count() == 0 {
            return Estimate::new(0.0, f64::NAN);
        }
        self.moments.variance_estimate(self.index(m, k))
    }

    pub fn mean_path(&self) -> Path {
        let mut p = Path::zeros(&self.grid, self.dim);
        for m in 0..self.grid.nodes() {
            for k in 0..self.dim {
                p.node_mut(m)[k] = self.node_mean(m, k).value;
            }
        }
        p
    }

    pub fn functional_index(&self, name: &str) -> Option<usize> {
        self.functional_names.iter().position(|n| n == name)
    }

    /// Batch-means estimate of a monitored functional.
    pub fn functional_estimate(&self, i: usize) -> Result<ErgodicEstimate> {
        ergodic_average(&self.functional_series[i], 0, self.config.batches.max(crate::diagnostics::MIN_BATCHES))
    }

    /// Node means and variances as named estimates.
    pub fn summary(&self) -> Summary {
        let mut s = Summary {
            nodes: (0..self.grid.nodes()).map(|m| self.grid.node(m)).collect(),
            ..Default::default()
        };
        for m in 0..self.grid.nodes() {
            for k in 0..self.dim {
                s.functionals.insert(format!("mean[{m}][{k}]"), self.node_mean(m, k));
                s.functionals.insert(format!("var[{m}][{k}]"), self.node_variance(m, k));
            }
        }
        for (i, name) in self.functional_names.iter().enumerate() {
            if let Ok(e) = self.functional_estimate(i) {
                s.functionals.insert(name.clone(), e.estimate());
            }
        }
        s
    }
}

/// Default starting path: the mean path of the linear part (free paths and
/// bridges) or the posterior mode (smoothing).
pub fn default_start(target: &TargetMeasure) -> Result<Path> {
    let op = target.operator();
    match target.spec().kind() {
        ProblemKind::FreePath | ProblemKind::Bridge => solve_bvp(op, &vec![0.0; op.size()]),
        ProblemKind::Smoothing => posterior_mode(target),
    }
}

/// Runs one chain from `start` (default: [`default_start`]) and collects
/// post-burn-in statistics. A divergence stops the chain and is reported in
/// [`ChainOutput::divergence`] together with the statistics gathered so far.
pub fn run_chain(
    target: &TargetMeasure,
    config: &SamplerConfig,
    seed: u64,
    start: Option<&Path>,
    functionals: &[Functional],
) -> Result<ChainOutput> {
    config.validate()?;
    let grid = *target.grid();
    let dim = target.spec().dim();
    let layout = target.layout().clone();
    let mean = default_start(target)?;
    let initial = match start {
        Some(p) => {
            if !p.matches(&grid, dim) {
                return Err(Error::DimensionMismatch("starting path does not match the grid".into()));
            }
            let mut q = p.clone();
            // Pinned nodes always carry the boundary data.
            layout.expand_into(layout.restrict(p.values()), q.values_mut());
            q
        }
        None => mean.clone(),
    };
    let threshold = config.divergence_threshold.unwrap_or(1e3 * (1.0 + mean.sup_norm()));
    let mut integrator = Integrator::new(target, config.scheme, config.delta)?.with_threshold(threshold);

    let recorded = config.steps.saturating_sub(config.burn_in);
    let batch_size = (recorded / config.batches as u64).max(1);
    let mut moments = BatchMoments::new(grid.nodes() * dim, batch_size);
    let mut series = vec![Vec::new(); functionals.len()];
    let mut samples = Vec::new();
    let mut sample_steps = Vec::new();
    let mut state = ChainState::new(layout.restrict(initial.values()).to_vec(), seed);
    let mut full = initial.clone();
    let mut divergence = None;

    while state.step < config.steps {
        if let Err(e) = integrator.step(&mut state) {
            match e {
                Error::Diverged { step, sup_norm, threshold } => {
                    log::warn!("chain diverged at step {step}: sup norm {sup_norm:.3e} > {threshold:.3e}");
                    divergence = Some(Divergence { step, sup_norm, threshold });
                    break;
                }
                other => return Err(other),
            }
        }
        if state.step > config.burn_in {
            layout.expand_into(&state.x, full.values_mut());
            moments.push(full.values());
            if (state.step - config.burn_in).is_multiple_of(config.thin) {
                for (s, f) in series.iter_mut().zip(functionals) {
                    s.push(f.eval(&full));
                }
                if config.record_paths {
                    samples.push(full.clone());
                }
                sample_steps.push(state.step);
            }
        }
    }

    Ok(ChainOutput {
        grid,
        dim,
        seed,
        config: config.clone(),
        initial,
        final_state: state,
        moments,
        functional_names: functionals.iter().map(|f| f.name().to_string()).collect(),
        functional_series: series,
        samples,
        sample_steps,
        divergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MatrixSet, Potential, ProblemSpec};
    use crate::operators::assemble_precision;
    use nalgebra::DMatrix;

    fn flat_bridge(m: usize, x0: f64, x1: f64) -> TargetMeasure {
        let spec = ProblemSpec::bridge(MatrixSet::standard(1).unwrap(), Potential::zero(1), vec![x0], vec![x1])
            .unwrap();
        TargetMeasure::new(spec, &Grid::new(m).unwrap()).unwrap()
    }

    #[test]
    fn crank_nicolson_scalar_recursion() {
        // v(1 + h)² = v(1 - h)² + 2δ with h = δλ/2 gives v = 1/λ.
        let (lambda, delta) = (4.0f64, 0.37f64);
        let h = delta * lambda / 2.0;
        let v = 2.0 * delta / ((1.0 + h).powi(2) - (1.0 - h).powi(2));
        assert!((v - 1.0 / lambda).abs() < 1e-15);
    }

    #[test]
    fn flat_bridge_preconditioner_is_straight_line() {
        let t = flat_bridge(8, 0.0, 1.0);
        let f = t.operator().lambda0().cholesky().unwrap();
        let x = vec![3.0; t.size()];
        let y = solve_preconditioner(&t, &f, &x);
        for (i, v) in y.iter().enumerate() {
            assert!((v - (i + 1) as f64 / 8.0).abs() < 1e-13);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = SamplerConfig::new(Scheme::Preconditioned, 0.1, 100);
        assert!(c.validate().is_ok());
        c.burn_in = 100;
        assert!(c.validate().is_err());
        c.burn_in = 0;
        c.delta = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_steps_returns_start() {
        let t = flat_bridge(4, -1.0, 1.0);
        let mut c = SamplerConfig::new(Scheme::SemiImplicit { theta: 0.5 }, 0.01, 0);
        c.burn_in = 0;
        let out = run_chain(&t, &c, 1, None, &[]).unwrap();
        assert_eq!(out.recorded_steps(), 0);
        assert!((out.node_mean(2, 0).value - 0.0).abs() < 1e-14);
        assert!(!out.diverged());
    }

    #[test]
    fn determinism() {
        let spec = ProblemSpec::bridge(
            MatrixSet::standard(1).unwrap(),
            Potential::double_well(1, 1.0, 1.0).unwrap(),
            vec![-1.0],
            vec![1.0],
        )
        .unwrap();
        let t = TargetMeasure::new(spec, &Grid::new(8).unwrap()).unwrap();
        for scheme in [Scheme::SemiImplicit { theta: 0.5 }, Scheme::Preconditioned] {
            let c = SamplerConfig::new(scheme, 0.05, 500);
            let f = [Functional::node_value(4, 0)];
            let a = run_chain(&t, &c, 7, None, &f).unwrap();
            let b = run_chain(&t, &c, 7, None, &f).unwrap();
            assert_eq!(a.functional_series, b.functional_series);
            assert_eq!(a.final_state.x, b.final_state.x);
        }
    }

    #[test]
    fn divergence_is_flagged() {
        let t = flat_bridge(4, 0.0, 0.0);
        let mut c = SamplerConfig::new(Scheme::SemiImplicit { theta: 0.5 }, 0.5, 1000);
        c.divergence_threshold = Some(0.5);
        let out = run_chain(&t, &c, 3, None, &[]).unwrap();
        let d = out.divergence.unwrap();
        assert!(d.sup_norm > 0.5);
        assert!(d.step < 1000);
    }

    #[test]
    fn preconditioned_gaussian_fixed_point() {
        // Free path with V = 0 and A = -1: Λ1 = 0, Û = 0, so y = Λ⁻¹g = m.
        let spec = ProblemSpec::free_path(
            MatrixSet::new(DMatrix::from_element(1, 1, -1.0), DMatrix::identity(1, 1)).unwrap(),
            Potential::zero(1),
            vec![2.0],
        )
        .unwrap();
        let grid = Grid::new(8).unwrap();
        let t = TargetMeasure::new(spec.clone(), &grid).unwrap();
        let op = assemble_precision(&spec, &grid).unwrap();
        let m = solve_bvp(&op, &vec![0.0; op.size()]).unwrap();
        let f = op.lambda0().cholesky().unwrap();
        let y = solve_preconditioner(&t, &f, t.layout().restrict(m.values()));
        for (a, b) in y.iter().zip(t.layout().restrict(m.values())) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
