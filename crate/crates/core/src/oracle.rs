//! Reference samplers and exact linear-Gaussian algebra, independent of the
//! Langevin integrators.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::diagnostics::{normalized_weights, BatchMoments, Estimate};
use crate::linalg::CholeskyFactor;
use crate::measure::TargetMeasure;
use crate::model::{Grid, LogAlpha, Observations, Path, ProblemKind, ProblemSpec};
use crate::operators::{sample_from_precision_into, solve_bvp, Layout};
use crate::sampler::{default_start, Functional};
use crate::{Error, Result, Rng};

/// A path drawn from the generative model, with synthetic observation
/// increments for smoothing problems.
#[derive(Clone, Debug)]
pub struct SdeSample {
    pub path: Path,
    pub observations: Option<Observations>,
}

const EXPLOSION: f64 = 1e8;

fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn mat_vec(m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum()).collect()
}

/// Draws the initial value of the smoothing signal from `ζ ∝ α e^{-V}`:
/// exactly when `ζ` is Gaussian, otherwise by a long overdamped Langevin
/// warm-up on `log ζ`.
fn sample_initial(spec: &ProblemSpec, rng: &mut Rng) -> Result<Vec<f64>> {
    let ProblemSpec::Smoothing { log_alpha, potential, .. } = spec else {
        unreachable!("initial law only for smoothing")
    };
    let d = spec.dim();
    if let Some((mean, cov)) = log_alpha.gaussian_initial_law(potential) {
        let l = cov
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("initial covariance".into()))?
            .l();
        let z = normals(rng, d);
        return Ok((0..d).map(|i| mean[i] + (0..d).map(|j| l[(i, j)] * z[j]).sum::<f64>()).collect());
    }
    let h = 1e-3;
    let mut x = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut gv = vec![0.0; d];
    for _ in 0..20_000 {
        log_alpha.grad_into(potential, &x, &mut g);
        potential.grad_into(&x, &mut gv);
        for k in 0..d {
            x[k] += h * (g[k] - gv[k]) + (2.0 * h).sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
        if !x.iter().all(|v| v.is_finite() && v.abs() < EXPLOSION) {
            return Err(Error::NonFinite("initial-law warm-up exploded".into()));
        }
    }
    Ok(x)
}

/// Euler–Maruyama path of the generative SDE on `grid`, with `substeps`
/// sub-steps per cell. Free paths and bridges simulate
/// `dX = AX du - BBᵀ∇V(X) du + B dW` from `x⁻` (bridges unconditioned);
/// smoothing simulates the signal from its initial law and the observation
/// increments `dY = A21 X du + B22 dW`.
pub fn simulate_sde(spec: &ProblemSpec, grid: &Grid, substeps: usize, rng: &mut Rng) -> Result<SdeSample> {
    spec.check_structure()?;
    let substeps = substeps.max(1);
    let d = spec.dim();
    let a = spec.drift_matrix();
    let cov = spec.noise_cov().clone();
    let b = match spec {
        ProblemSpec::FreePath { matrices, .. } | ProblemSpec::Bridge { matrices, .. } => matrices.b().clone(),
        ProblemSpec::Smoothing { matrices, .. } => matrices.b11().clone(),
    };
    let v = spec.potential();
    let h = grid.du() / substeps as f64;
    let sh = h.sqrt();
    let mut x = match spec.start() {
        Some(s) => s.to_vec(),
        None => sample_initial(spec, rng)?,
    };
    let mut path = Path::zeros(grid, d);
    path.node_mut(0).copy_from_slice(&x);
    let obs = match spec {
        ProblemSpec::Smoothing { matrices, .. } => Some(matrices.clone()),
        _ => None,
    };
    let mut increments = Vec::new();
    let mut gv = vec![0.0; d];
    for cell in 0..grid.intervals() {
        let mut dy = obs.as_ref().map(|m| vec![0.0; m.obs_dim()]);
        for _ in 0..substeps {
            if let (Some(m), Some(dy)) = (&obs, dy.as_mut()) {
                let ax = mat_vec(m.a21(), &x);
                let z = normals(rng, m.obs_dim());
                let bz = mat_vec(m.b22(), &z);
                for j in 0..dy.len() {
                    dy[j] += ax[j] * h + sh * bz[j];
                }
            }
            v.grad_into(&x, &mut gv);
            let drift_lin = mat_vec(&a, &x);
            let drift_pot = mat_vec(&cov, &gv);
            let z = normals(rng, d);
            let bz = mat_vec(&b, &z);
            for k in 0..d {
                x[k] += h * (drift_lin[k] - drift_pot[k]) + sh * bz[k];
            }
            if !x.iter().all(|v| v.is_finite() && v.abs() < EXPLOSION) {
                return Err(Error::NonFinite(format!(
                    "Euler path exploded in cell {cell}; use a finer grid or more substeps"
                )));
            }
        }
        path.node_mut(cell + 1).copy_from_slice(&x);
        if let Some(dy) = dy {
            increments.extend(dy);
        }
    }
    let observations = match &obs {
        Some(m) => Some(Observations::from_increments(grid, m.obs_dim(), increments)?),
        None => None,
    };
    Ok(SdeSample { path, observations })
}

/// Paths with log-weights on a common grid.
#[derive(Clone, Debug)]
pub struct WeightedEnsemble {
    grid: Grid,
    dim: usize,
    values: Vec<f64>,
    log_weights: Vec<f64>,
}

impl WeightedEnsemble {
    pub fn new(grid: Grid, dim: usize, values: Vec<f64>, log_weights: Vec<f64>) -> Result<Self> {
        let stride = grid.nodes() * dim;
        if values.len() != stride * log_weights.len() {
            return Err(Error::DimensionMismatch("ensemble values and weights".into()));
        }
        if log_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("ensemble log-weights".into()));
        }
        Ok(Self { grid, dim, values, log_weights })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        normalized_weights(self.len(), Some(&self.log_weights))
    }

    /// `(Σw)² / Σw²`.
    pub fn effective_size(&self) -> f64 {
        let w = self.weights();
        1.0 / w.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn path(&self, i: usize) -> Path {
        let stride = self.grid.nodes() * self.dim;
        Path::from_values(&self.grid, self.dim, self.values[i * stride..(i + 1) * stride].to_vec())
            .expect("ensemble paths are finite")
    }

    /// Component `k` at node `m` across the ensemble.
    pub fn marginal(&self, m: usize, k: usize) -> Vec<f64> {
        let stride = self.grid.nodes() * self.dim;
        (0..self.len()).map(|i| self.values[i * stride + m * self.dim + k]).collect()
    }

    /// Self-normalized estimate of `E f` with delta-method standard error.
    pub fn expectation(&self, f: impl Fn(&Path) -> f64) -> Estimate {
        let vals: Vec<f64> = (0..self.len()).map(|i| f(&self.path(i))).collect();
        weighted_estimate(&vals, &self.weights())
    }

    pub fn node_mean(&self, m: usize, k: usize) -> Estimate {
        let x = self.marginal(m, k);
        if let Some(c) = constant(&x) {
            return Estimate::new(c, 0.0);
        }
        weighted_estimate(&x, &self.weights())
    }

    /// Weighted variance of the node marginal; the error bar is that of the
    /// weighted mean of `(x - μ)²`.
    pub fn node_variance(&self, m: usize, k: usize) -> Estimate {
        let x = self.marginal(m, k);
        if constant(&x).is_some() {
            return Estimate::new(0.0, 0.0);
        }
        let w = self.weights();
        let mu: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        let sq: Vec<f64> = x.iter().map(|a| (a - mu) * (a - mu)).collect();
        weighted_estimate(&sq, &w)
    }
}

/// Pinned nodes carry one value; weights summing to `1 ± ulp` must not
/// turn that into a spurious spread.
fn constant(x: &[f64]) -> Option<f64> {
    let first = *x.first()?;
    x.iter().all(|v| *v == first).then_some(first)
}

fn weighted_estimate(vals: &[f64], w: &[f64]) -> Estimate {
    let mu: f64 = vals.iter().zip(w).map(|(a, b)| a * b).sum();
    let var: f64 = vals.iter().zip(w).map(|(a, b)| b * b * (a - mu) * (a - mu)).sum();
    Estimate::new(mu, var.sqrt())
}

/// Importance sampler: exact draws from the Gaussian part `N(Λ⁻¹g, Λ⁻¹)`,
/// weighted by `e^{Û}`. Requires `Λ` positive definite.
pub fn importance_bridge(target: &TargetMeasure, n: usize, rng: &mut Rng) -> Result<WeightedEnsemble> {
    let op = target.operator();
    let factor = op
        .lambda()
        .cholesky()
        .map_err(|_| Error::OracleInfeasible("the Gaussian part of the target is not proper".into()))?;
    let mean = factor.solve(op.forcing());
    let layout = target.layout();
    let grid = *target.grid();
    let dim = target.spec().dim();
    let stride = grid.nodes() * dim;
    let mut values = vec![0.0; n * stride];
    let mut log_weights = Vec::with_capacity(n);
    let mut z = vec![0.0; op.size()];
    for i in 0..n {
        sample_from_precision_into(&factor, rng, &mut z);
        z.iter_mut().zip(&mean).for_each(|(a, b)| *a += b);
        layout.expand_into(&z, &mut values[i * stride..(i + 1) * stride]);
        log_weights.push(target.log_u_unknowns(&z));
    }
    let ens = WeightedEnsemble::new(grid, dim, values, log_weights)?;
    if ens.effective_size() < 50.0 {
        log::warn!("importance weights degenerate: n_eff = {:.1}", ens.effective_size());
    }
    Ok(ens)
}

/// Accepted paths of the brute-force conditioning, with acceptance rate.
#[derive(Clone, Debug)]
pub struct RejectionEnsemble {
    pub ensemble: WeightedEnsemble,
    pub acceptance_rate: f64,
    pub attempts: u64,
}

/// Simulates unconditioned Euler paths from `x⁻` and keeps those with
/// `|X(1) - x⁺| ≤ tol`. Aborts once at least `10⁵` attempts show an
/// acceptance rate below `10⁻⁵`.
pub fn rejection_bridge(
    spec: &ProblemSpec,
    grid: &Grid,
    tol: f64,
    n_target: usize,
    substeps: usize,
    rng: &mut Rng,
) -> Result<RejectionEnsemble> {
    let Some(end) = spec.end() else {
        return Err(Error::Unsupported("rejection sampling needs a bridge".into()));
    };
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter("tolerance must be positive".into()));
    }
    let end = end.to_vec();
    let dim = spec.dim();
    let mut values = Vec::with_capacity(n_target * grid.nodes() * dim);
    let mut accepted = 0usize;
    let mut attempts = 0u64;
    while accepted < n_target {
        let s = simulate_sde(spec, grid, substeps, rng)?;
        attempts += 1;
        let last = s.path.node(grid.intervals());
        let dist = last.iter().zip(&end).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dist <= tol {
            values.extend_from_slice(s.path.values());
            accepted += 1;
        }
        if attempts >= 100_000 && (accepted as f64) < 1e-5 * attempts as f64 {
            return Err(Error::OracleInfeasible(format!(
                "acceptance rate {:.2e} after {attempts} attempts; increase tol or reduce the dimension",
                accepted as f64 / attempts as f64
            )));
        }
    }
    let ensemble = WeightedEnsemble::new(*grid, dim, values, vec![0.0; accepted])?;
    Ok(RejectionEnsemble { ensemble, acceptance_rate: accepted as f64 / attempts as f64, attempts })
}

/// Proposal metric of [`mala_oracle`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MalaMetric {
    /// `x' = x + δ∇log π + √(2δ)ξ`.
    Identity,
    /// Proposal covariance `2δ K⁻¹` and drift `δK⁻¹∇log π`, with `K = Λ`
    /// when positive definite and `Λ0` otherwise.
    Prior,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MalaConfig {
    pub delta: f64,
    pub steps: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub metric: MalaMetric,
}

#[derive(Clone, Debug)]
pub struct MalaOutput {
    pub acceptance_rate: f64,
    pub functional_names: Vec<String>,
    pub functional_series: Vec<Vec<f64>>,
    /// Node-value moments over all post-burn-in steps.
    pub moments: BatchMoments,
}

/// Metropolis-adjusted Langevin on the discrete target, started at the
/// default chain start. Exactly invariant for `log π`.
pub fn mala_oracle(
    target: &TargetMeasure,
    config: &MalaConfig,
    functionals: &[Functional],
    rng: &mut Rng,
) -> Result<MalaOutput> {
    if !(config.delta > 0.0) || config.thin == 0 || (config.steps > 0 && config.burn_in >= config.steps) {
        return Err(Error::InvalidParameter("MALA needs delta > 0, thin >= 1 and burn_in < steps".into()));
    }
    let op = target.operator();
    let n = op.size();
    let metric: Option<(CholeskyFactor, &crate::linalg::BlockTridiag)> = match config.metric {
        MalaMetric::Identity => None,
        MalaMetric::Prior => Some(match op.lambda().cholesky() {
            Ok(f) => (f, op.lambda()),
            Err(_) => (op.lambda0().cholesky()?, op.lambda0()),
        }),
    };
    let delta = config.delta;
    let layout: &Layout = target.layout();
    let start = default_start(target)?;
    let mut x = layout.restrict(start.values()).to_vec();
    let mut full = start.clone();

    // Drift δ K⁻¹ ∇log π(x) and its value.
    let drift = |x: &[f64], out: &mut Vec<f64>| {
        target.grad_unknowns(x, out);
        if let Some((f, _)) = &metric {
            f.solve_in_place(out);
        }
        out.iter_mut().for_each(|v| *v *= delta);
    };
    // log q(to | from) up to a constant: -(1/4δ) |to - from - drift(from)|²_K.
    let log_q = |to: &[f64], from: &[f64], drift_from: &[f64]| -> f64 {
        let r: Vec<f64> = (0..to.len()).map(|i| to[i] - from[i] - drift_from[i]).collect();
        let q = match &metric {
            Some((_, k)) => k.quadratic_form(&r),
            None => r.iter().map(|v| v * v).sum(),
        };
        -q / (4.0 * delta)
    };

    let mut lp = target.log_density_unknowns(&x);
    let mut dx = vec![0.0; n];
    drift(&x, &mut dx);
    let mut prop = vec![0.0; n];
    let mut dprop = vec![0.0; n];
    let mut noise = vec![0.0; n];
    let mut accepted = 0u64;
    let recorded = config.steps.saturating_sub(config.burn_in);
    let mut moments = BatchMoments::new(full.values().len(), (recorded / 40).max(1));
    let mut series = vec![Vec::new(); functionals.len()];
    let s = (2.0 * delta).sqrt();
    for step in 1..=config.steps {
        match &metric {
            Some((f, _)) => sample_from_precision_into(f, rng, &mut noise),
            None => noise.iter_mut().for_each(|v| *v = rng.sample(StandardNormal)),
        }
        for i in 0..n {
            prop[i] = x[i] + dx[i] + s * noise[i];
        }
        let lp_prop = target.log_density_unknowns(&prop);
        if lp_prop.is_finite() {
            drift(&prop, &mut dprop);
            let log_ratio = lp_prop - lp + log_q(&x, &prop, &dprop) - log_q(&prop, &x, &dx);
            if log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp() {
                std::mem::swap(&mut x, &mut prop);
                std::mem::swap(&mut dx, &mut dprop);
                lp = lp_prop;
                accepted += 1;
            }
        }
        if step > config.burn_in {
            layout.expand_into(&x, full.values_mut());
            moments.push(full.values());
            if (step - config.burn_in).is_multiple_of(config.thin) {
                for (s, f) in series.iter_mut().zip(functionals) {
                    s.push(f.eval(&full));
                }
            }
        }
    }
    let acceptance_rate = if config.steps == 0 { 1.0 } else { accepted as f64 / config.steps as f64 };
    if !(0.1..=0.9).contains(&acceptance_rate) {
        log::warn!("MALA acceptance rate {acceptance_rate:.3} outside [0.1, 0.9]; retune delta");
    }
    Ok(MalaOutput {
        acceptance_rate,
        functional_names: functionals.iter().map(|f| f.name().to_string()).collect(),
        functional_series: series,
        moments,
    })
}

/// Posterior mean path and node covariances of a linear smoothing problem.
#[derive(Clone, Debug)]
pub struct SmootherOutput {
    pub mean: Path,
    pub covariances: Vec<DMatrix<f64>>,
}

impl SmootherOutput {
    /// Variance of component `k` at every node.
    pub fn variances(&self, k: usize) -> Vec<f64> {
        self.covariances.iter().map(|c| c[(k, k)]).collect()
    }
}

/// Kalman filter and Rauch–Tung–Striebel smoother for a smoothing problem
/// with quadratic potential `V = ½xᵀQx`.
///
/// The signal uses the Euler transition `x_{m+1} = (I - du·S Q)x_m + w`,
/// `w ~ N(0, du·S)` with `S = B11B11ᵀ`. Observations enter as node
/// pseudo-measurements `z_m = (ΔY_{m-1} + ΔY_m) / (2 w_m)` of `A21 x_m` with
/// noise covariance `B22B22ᵀ / w_m`, where `w_m` are the trapezoidal weights
/// and missing increments at the ends are dropped.
pub fn rts_smoother(spec: &ProblemSpec, grid: &Grid) -> Result<SmootherOutput> {
    let ProblemSpec::Smoothing { matrices, potential, log_alpha, observations } = spec else {
        return Err(Error::Unsupported("the smoother needs a smoothing problem".into()));
    };
    spec.check_grid(grid)?;
    let q = potential
        .quadratic_matrix()
        .ok_or_else(|| Error::Unsupported("the smoother needs a quadratic potential".into()))?;
    let (mu0, p0) = log_alpha
        .gaussian_initial_law(potential)
        .ok_or_else(|| Error::Unsupported("the smoother needs a Gaussian initial law".into()))?;
    let d = spec.dim();
    let du = grid.du();
    let s = matrices.signal_cov();
    let f = DMatrix::identity(d, d) - s * q * du;
    let process = s * du;
    let h = matrices.a21();
    let r = matrices.obs_cov();
    let nodes = grid.nodes();

    let pseudo = |m: usize| -> DVector<f64> {
        let p = observations.obs_dim();
        let mut z = DVector::zeros(p);
        for cell in [m.checked_sub(1), (m < nodes - 1).then_some(m)].into_iter().flatten() {
            for j in 0..p {
                z[j] += 0.5 * observations.increment(cell)[j];
            }
        }
        z / grid.weight(m)
    };

    let mut filt_mean = Vec::with_capacity(nodes);
    let mut filt_cov = Vec::with_capacity(nodes);
    let mut pred_mean = Vec::with_capacity(nodes);
    let mut pred_cov = Vec::with_capacity(nodes);
    let mut m = DVector::from_vec(mu0);
    let mut p = p0;
    for node in 0..nodes {
        if node > 0 {
            m = &f * &m;
            p = &f * &p * f.transpose() + &process;
        }
        pred_mean.push(m.clone());
        pred_cov.push(p.clone());
        let rn = r / grid.weight(node);
        let sk = h * &p * h.transpose() + rn;
        let sk_inv = sk
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("innovation covariance".into()))?
            .inverse();
        let gain = &p * h.transpose() * sk_inv;
        let innov = pseudo(node) - h * &m;
        m = &m + &gain * innov;
        let id = DMatrix::<f64>::identity(d, d);
        let ikh = &id - &gain * h;
        // Joseph form keeps the covariance symmetric positive definite.
        p = &ikh * &p * ikh.transpose() + &gain * (r / grid.weight(node)) * gain.transpose();
        filt_mean.push(m.clone());
        filt_cov.push(p.clone());
    }

    let mut means = filt_mean.clone();
    let mut covs = filt_cov.clone();
    for node in (0..nodes - 1).rev() {
        let pred_inv = pred_cov[node + 1]
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("predicted covariance".into()))?
            .inverse();
        let c = &filt_cov[node] * f.transpose() * pred_inv;
        means[node] = &filt_mean[node] + &c * (&means[node + 1] - &pred_mean[node + 1]);
        covs[node] = &filt_cov[node] + &c * (&covs[node + 1] - &pred_cov[node + 1]) * c.transpose();
    }
    let mut mean = Path::zeros(grid, d);
    for (node, v) in means.iter().enumerate() {
        mean.node_mut(node).copy_from_slice(v.as_slice());
    }
    Ok(SmootherOutput { mean, covariances: covs })
}

/// Exact moments of the discrete target when the potential is quadratic.
#[derive(Clone, Debug)]
pub struct GaussianMoments {
    /// Full mean path, pinned nodes included.
    pub mean: Path,
    /// Covariance of the free node values.
    pub covariance: DMatrix<f64>,
    pub layout: Layout,
}

impl GaussianMoments {
    /// Variance of component `k` at grid node `m`; zero at pinned nodes.
    pub fn node_variance(&self, m: usize, k: usize) -> f64 {
        if !self.layout.is_free(m) {
            return 0.0;
        }
        let i = (m - self.layout.first()) * self.layout.dim() + k;
        self.covariance[(i, i)]
    }
}

/// Mean and covariance of the discrete target for quadratic `V = ½xᵀQx`.
///
/// The quadratic and linear parts of `Û` are written down directly from `Q`,
/// `A` and the noise covariance `C`: each node contributes
/// `w_m·½xᵀ(QA + AᵀQ - QCQ)x`, the `-V(x_M)` end term contributes `-Q`, and
/// `log α` contributes `-Q` (stationary) or `Q - P` with linear part `Pμ`.
pub fn gaussian_reference_moments(target: &TargetMeasure) -> Result<GaussianMoments> {
    let spec = target.spec();
    let q = spec
        .potential()
        .quadratic_matrix()
        .ok_or_else(|| Error::Unsupported("reference moments need a quadratic potential".into()))?;
    let op = target.operator();
    let layout = op.layout().clone();
    let grid = op.grid();
    let d = spec.dim();
    let a = spec.drift_matrix();
    let c = spec.noise_cov();
    let interior = q * &a + a.transpose() * q - q * c * q;

    let n = layout.size();
    let mut k = op.lambda().to_dense();
    let mut b = DVector::from_column_slice(op.forcing());
    let last = grid.intervals();
    for node in layout.first()..=layout.last() {
        let i = (node - layout.first()) * d;
        let mut h = &interior * grid.weight(node);
        if node == last && spec.kind() != ProblemKind::Bridge {
            h -= q;
        }
        if node == 0 {
            if let ProblemSpec::Smoothing { log_alpha, .. } = spec {
                match log_alpha {
                    LogAlpha::Stationary => h -= q,
                    LogAlpha::Gaussian { mean, precision } => {
                        h += q - precision;
                        let lin = precision * DVector::from_column_slice(mean);
                        for r in 0..d {
                            b[i + r] += lin[r];
                        }
                    }
                    LogAlpha::Custom { .. } => {
                        return Err(Error::Unsupported("reference moments need a closed-form log alpha".into()))
                    }
                }
            }
        }
        for r in 0..d {
            for s in 0..d {
                k[(i + r, i + s)] -= h[(r, s)];
            }
        }
    }
    let k = (&k + k.transpose()) * 0.5;
    let chol = k
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("total precision of the Gaussian target".into()))?;
    let x = chol.solve(&b);
    let covariance = chol.inverse();
    debug_assert_eq!(covariance.nrows(), n);
    let mean = layout.expand(grid, x.as_slice());
    Ok(GaussianMoments { mean, covariance, layout })
}

/// Linear boundary-value centre of a free path or bridge target.
pub fn linear_mean(target: &TargetMeasure) -> Result<Path> {
    let op = target.operator();
    solve_bvp(op, &vec![0.0; op.size()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MatrixSet, Potential, SmoothingMatrices};
    use crate::seeded_rng;

    fn one() -> DMatrix<f64> {
        DMatrix::identity(1, 1)
    }

    #[test]
    fn brownian_endpoint_variance() {
        let grid = Grid::new(8).unwrap();
        let spec = ProblemSpec::free_path(MatrixSet::standard(1).unwrap(), Potential::zero(1), vec![0.0]).unwrap();
        let mut rng = seeded_rng(1);
        let n = 10_000;
        let ends: Vec<f64> = (0..n)
            .map(|_| simulate_sde(&spec, &grid, 1, &mut rng).unwrap().path.node(8)[0])
            .collect();
        let mean = ends.iter().sum::<f64>() / n as f64;
        let var = ends.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn ou_endpoint_variance() {
        // V = x²/2, B = 1: drift -x, Var X(1) = (1 - e^{-2})/2 plus O(du).
        let grid = Grid::new(16).unwrap();
        let spec = ProblemSpec::free_path(MatrixSet::standard(1).unwrap(), Potential::quadratic(one()).unwrap(), vec![0.0])
            .unwrap();
        let mut rng = seeded_rng(2);
        let n = 20_000;
        let ends: Vec<f64> = (0..n)
            .map(|_| simulate_sde(&spec, &grid, 8, &mut rng).unwrap().path.node(16)[0])
            .collect();
        let var = ends.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let exact = (1.0 - (-2.0f64).exp()) / 2.0;
        let se = exact * (2.0 / n as f64).sqrt();
        assert!((var - exact).abs() < 3.0 * se + 0.02, "{var} vs {exact}");
    }

    #[test]
    fn drift_only_flow() {
        // With B tiny the path follows x' = -x from 1.
        let grid = Grid::new(64).unwrap();
        let m = MatrixSet::new(DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 1e-9)).unwrap();
        let v = Potential::quadratic(DMatrix::from_element(1, 1, 1e18)).unwrap();
        let spec = ProblemSpec::free_path(m, v, vec![1.0]).unwrap();
        let p = simulate_sde(&spec, &grid, 1, &mut seeded_rng(0)).unwrap().path;
        assert!((p.node(64)[0] - (-1.0f64).exp()).abs() < 1.0 / 64.0);
    }

    #[test]
    fn flat_importance_weights_are_equal() {
        let grid = Grid::new(8).unwrap();
        let spec =
            ProblemSpec::bridge(MatrixSet::standard(1).unwrap(), Potential::zero(1), vec![0.0], vec![0.0]).unwrap();
        let t = TargetMeasure::new(spec, &grid).unwrap();
        let e = importance_bridge(&t, 500, &mut seeded_rng(3)).unwrap();
        assert!((e.effective_size() - 500.0).abs() < 1e-9);
    }

    #[test]
    fn reference_moments_closed_forms() {
        let grid = Grid::new(16).unwrap();
        let flat =
            ProblemSpec::bridge(MatrixSet::standard(1).unwrap(), Potential::zero(1), vec![0.0], vec![0.0]).unwrap();
        let g = gaussian_reference_moments(&TargetMeasure::new(flat, &grid).unwrap()).unwrap();
        for i in 0..15 {
            for j in i..15 {
                let (um, un) = (grid.node(i + 1), grid.node(j + 1));
                assert!((g.covariance[(i, j)] - um * (1.0 - un)).abs() < 1e-12);
            }
        }
        let ou = ProblemSpec::bridge(
            MatrixSet::standard(1).unwrap(),
            Potential::quadratic(one()).unwrap(),
            vec![0.0],
            vec![0.0],
        )
        .unwrap();
        let g = gaussian_reference_moments(&TargetMeasure::new(ou, &grid).unwrap()).unwrap();
        assert!(g.node_variance(8, 0) < 0.25);
        let free = ProblemSpec::free_path(MatrixSet::standard(1).unwrap(), Potential::zero(1), vec![0.0]).unwrap();
        let g = gaussian_reference_moments(&TargetMeasure::new(free, &grid).unwrap()).unwrap();
        assert!((g.node_variance(16, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smoother_without_observations_is_prior() {
        let grid = Grid::new(16).unwrap();
        let spec = ProblemSpec::smoothing(
            SmoothingMatrices::new(DMatrix::zeros(1, 1), one(), one()).unwrap(),
            Potential::quadratic(one()).unwrap(),
            LogAlpha::Stationary,
            Observations::zeros(&grid, 1),
        )
        .unwrap();
        let out = rts_smoother(&spec, &grid).unwrap();
        assert!(out.mean.values().iter().all(|v| v.abs() < 1e-14));
        // Stationary prior keeps variance 1/(2Q) up to O(du).
        for v in out.variances(0) {
            assert!((v - 0.5).abs() < 0.05, "{v}");
        }
    }

    #[test]
    fn smoother_refuses_nonlinear() {
        let grid = Grid::new(4).unwrap();
        let spec = ProblemSpec::smoothing(
            SmoothingMatrices::new(one(), one(), one()).unwrap(),
            Potential::double_well(1, 1.0, 1.0).unwrap(),
            LogAlpha::Stationary,
            Observations::zeros(&grid, 1),
        )
        .unwrap();
        assert!(matches!(rts_smoother(&spec, &grid), Err(Error::Unsupported(_))));
    }
}
