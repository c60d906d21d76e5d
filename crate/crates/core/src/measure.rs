//! The discrete target density and its gradient.
//!
//! `log π(x) = -½ xᵀΛx + gᵀx + Û(x)` on the free nodes. `Û` is a sum of
//! node-local terms: interior Girsanov terms weighted by the trapezoidal
//! weights, plus boundary functionals (`-V(x_M)`, `log α(x_0)`) with weight 1.

use nalgebra::DMatrix;

use crate::linalg::{flat, BlockTridiag};
use crate::model::{Grid, LogAlpha, Path, Potential, ProblemKind, ProblemSpec};
use crate::operators::{assemble_precision, assemble_precision_with, DiscreteOperator, Layout};
use crate::{Error, Result};

/// Reusable buffers for the node-wise derivative evaluations.
#[derive(Clone, Debug)]
struct Scratch {
    grad: Vec<f64>,
    hess: Vec<f64>,
    third: Vec<f64>,
    tmp: Vec<f64>,
    tmp2: Vec<f64>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Self {
            grad: vec![0.0; d],
            hess: vec![0.0; d * d],
            third: vec![0.0; d],
            tmp: vec![0.0; d],
            tmp2: vec![0.0; d],
        }
    }
}

fn matvec(m: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for i in 0..d {
        out[i] = (0..d).map(|j| m[i * d + j] * x[j]).sum();
    }
}

fn matvec_t(m: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for j in 0..d {
        out[j] = (0..d).map(|i| m[i * d + j] * x[i]).sum();
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Φ` and `∇Φ` for a fixed potential and noise covariance `C = BBᵀ`.
#[derive(Clone, Debug)]
struct PhiKernel {
    cov: Vec<f64>,
}

impl PhiKernel {
    fn new(cov: &DMatrix<f64>) -> Self {
        Self { cov: flat(cov) }
    }

    fn phi(&self, v: &Potential, x: &[f64], s: &mut Scratch) -> f64 {
        v.grad_into(x, &mut s.grad);
        v.hess_into(x, &mut s.hess);
        matvec(&self.cov, &s.grad, &mut s.tmp);
        0.5 * (dot(&s.grad, &s.tmp) - dot(&self.cov, &s.hess))
    }

    /// `∇Φ = D²V·C·∇V - ½ T(x; C)`.
    fn grad_phi(&self, v: &Potential, x: &[f64], s: &mut Scratch, out: &mut [f64]) {
        v.grad_into(x, &mut s.grad);
        v.hess_into(x, &mut s.hess);
        v.third_contract_into(x, &self.cov, &mut s.third);
        matvec(&self.cov, &s.grad, &mut s.tmp);
        matvec(&s.hess, &s.tmp, out);
        for (o, t) in out.iter_mut().zip(&s.third) {
            *o -= 0.5 * t;
        }
    }
}

fn finite_all(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// `Φ(x) = ½(|Bᵀ∇V(x)|² - BBᵀ : D²V(x))`, with `noise_cov = BBᵀ`.
pub fn capital_phi(potential: &Potential, noise_cov: &DMatrix<f64>, x: &[f64]) -> Result<f64> {
    let d = potential.dim();
    if x.len() != d || noise_cov.shape() != (d, d) {
        return Err(Error::DimensionMismatch("capital_phi arguments".into()));
    }
    let mut s = Scratch::new(d);
    let value = PhiKernel::new(noise_cov).phi(potential, x, &mut s);
    finite_all(&s.grad, "gradient of V")?;
    finite_all(&s.hess, "Hessian of V")?;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite("Phi".into()))
    }
}

/// `∇Φ(x) = D²V·BBᵀ·∇V - ½ T(x; BBᵀ)`.
pub fn grad_phi(potential: &Potential, noise_cov: &DMatrix<f64>, x: &[f64]) -> Result<Vec<f64>> {
    let d = potential.dim();
    if x.len() != d || noise_cov.shape() != (d, d) {
        return Err(Error::DimensionMismatch("grad_phi arguments".into()));
    }
    let mut s = Scratch::new(d);
    let mut out = vec![0.0; d];
    PhiKernel::new(noise_cov).grad_phi(potential, x, &mut s, &mut out);
    finite_all(&out, "gradient of Phi")?;
    Ok(out)
}

fn check_path(spec: &ProblemSpec, grid: &Grid, path: &Path) -> Result<()> {
    if !path.matches(grid, spec.dim()) {
        return Err(Error::DimensionMismatch(format!(
            "path has {} nodes of dimension {}, expected {} of dimension {}",
            path.nodes(),
            path.dim(),
            grid.nodes(),
            spec.dim()
        )));
    }
    Ok(())
}

/// Girsanov log-density of a free path or bridge against the linear SDE,
/// up to normalization: `-V(ω(1)) + Σ w_m⟨∇V(ω_m), Aω_m⟩ - Σ w_m Φ(ω_m)`.
pub fn girsanov_log_density(spec: &ProblemSpec, grid: &Grid, path: &Path) -> Result<f64> {
    if spec.kind() == ProblemKind::Smoothing {
        return Err(Error::Unsupported(
            "the Girsanov density is defined for free paths and bridges".into(),
        ));
    }
    check_path(spec, grid, path)?;
    let terms = LocalTerms::new(spec, grid);
    let mut s = Scratch::new(spec.dim());
    let v = spec.potential();
    let mut total = -v.value(path.node(grid.intervals()));
    for m in 0..grid.nodes() {
        total += terms.interior_value(m, path.node(m), &mut s);
    }
    Ok(total)
}

/// The nonlinear part `Û` of the log target.
///
/// * free path: `-V(x_M) + Σ w_m⟨∇V, Ax⟩ - Σ w_m Φ`
/// * bridge: `Σ w_m⟨∇V, Ax⟩ - Σ w_m Φ`
/// * smoothing: `log α(x_0) - V(x_M) - Σ w_m Φ`
pub fn log_u(spec: &ProblemSpec, grid: &Grid, path: &Path) -> Result<f64> {
    check_path(spec, grid, path)?;
    let terms = LocalTerms::new(spec, grid);
    let mut s = Scratch::new(spec.dim());
    let value = terms.value(path.values(), &mut s);
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite("log-density".into()))
    }
}

/// Node-local decomposition of `Û`.
#[derive(Clone, Debug)]
struct LocalTerms {
    kind: ProblemKind,
    dim: usize,
    nodes: usize,
    weights: Vec<f64>,
    drift: Option<Vec<f64>>,
    kernel: PhiKernel,
    potential: Potential,
    log_alpha: Option<LogAlpha>,
}

impl LocalTerms {
    fn new(spec: &ProblemSpec, grid: &Grid) -> Self {
        let a = spec.drift_matrix();
        let drift = (a.iter().any(|v| *v != 0.0)).then(|| flat(&a));
        let log_alpha = match spec {
            ProblemSpec::Smoothing { log_alpha, .. } => Some(log_alpha.clone()),
            _ => None,
        };
        Self {
            kind: spec.kind(),
            dim: spec.dim(),
            nodes: grid.nodes(),
            weights: grid.weights(),
            drift,
            kernel: PhiKernel::new(spec.noise_cov()),
            potential: spec.potential().clone(),
            log_alpha,
        }
    }

    /// `w_m(⟨∇V, Ax⟩ - Φ)` at node `m`.
    fn interior_value(&self, m: usize, x: &[f64], s: &mut Scratch) -> f64 {
        let phi = self.kernel.phi(&self.potential, x, s);
        let mut val = -phi;
        if let Some(a) = &self.drift {
            // s.grad still holds ∇V(x).
            matvec(a, x, &mut s.tmp);
            val += dot(&s.grad, &s.tmp);
        }
        self.weights[m] * val
    }

    fn boundary_value(&self, m: usize, x: &[f64]) -> f64 {
        let mut val = 0.0;
        if m == self.nodes - 1 && self.kind != ProblemKind::Bridge {
            val -= self.potential.value(x);
        }
        if m == 0 {
            if let Some(la) = &self.log_alpha {
                val += la.value(&self.potential, x);
            }
        }
        val
    }

    fn node_value(&self, m: usize, x: &[f64], s: &mut Scratch) -> f64 {
        self.interior_value(m, x, s) + self.boundary_value(m, x)
    }

    fn value(&self, full: &[f64], s: &mut Scratch) -> f64 {
        let d = self.dim;
        (0..self.nodes)
            .map(|m| self.node_value(m, &full[m * d..(m + 1) * d], s))
            .sum()
    }

    /// Gradient of the node-`m` term, written to `out`.
    fn node_grad(&self, m: usize, x: &[f64], s: &mut Scratch, out: &mut [f64]) {
        let d = self.dim;
        let w = self.weights[m];
        self.kernel.grad_phi(&self.potential, x, s, out);
        for o in out.iter_mut() {
            *o *= -w;
        }
        if let Some(a) = &self.drift {
            // ∇⟨∇V, Ax⟩ = D²V·A·x + Aᵀ∇V; s.grad and s.hess hold ∇V, D²V.
            matvec(a, x, &mut s.tmp);
            matvec(&s.hess, &s.tmp, &mut s.tmp2);
            matvec_t(a, &s.grad, &mut s.tmp);
            for k in 0..d {
                out[k] += w * (s.tmp2[k] + s.tmp[k]);
            }
        }
        if m == self.nodes - 1 && self.kind != ProblemKind::Bridge {
            self.potential.grad_into(x, &mut s.tmp);
            for k in 0..d {
                out[k] -= s.tmp[k];
            }
        }
        if m == 0 {
            if let Some(la) = &self.log_alpha {
                la.grad_into(&self.potential, x, &mut s.tmp);
                for k in 0..d {
                    out[k] += s.tmp[k];
                }
            }
        }
    }

    /// Row-major Hessian of the node-`m` term by central differences of
    /// its gradient.
    fn node_hess(&self, m: usize, x: &[f64], s: &mut Scratch, out: &mut [f64]) {
        let d = self.dim;
        let mut p = x.to_vec();
        let mut plus = vec![0.0; d];
        let mut minus = vec![0.0; d];
        for k in 0..d {
            let h = 1e-5 * (1.0 + x[k].abs());
            p[k] = x[k] + h;
            self.node_grad(m, &p, s, &mut plus);
            p[k] = x[k] - h;
            self.node_grad(m, &p, s, &mut minus);
            p[k] = x[k];
            for i in 0..d {
                out[i * d + k] = (plus[i] - minus[i]) / (2.0 * h);
            }
        }
        for i in 0..d {
            for j in 0..i {
                let v = 0.5 * (out[i * d + j] + out[j * d + i]);
                out[i * d + j] = v;
                out[j * d + i] = v;
            }
        }
    }
}

/// The discrete target measure of one problem on one grid.
#[derive(Clone, Debug)]
pub struct TargetMeasure {
    spec: ProblemSpec,
    op: DiscreteOperator,
    terms: LocalTerms,
}

/// Per-caller buffers for [`TargetMeasure::grad_log_u_into`].
#[derive(Clone, Debug)]
pub struct GradWorkspace {
    full: Vec<f64>,
    node: Vec<f64>,
    scratch: Scratch,
}

impl TargetMeasure {
    pub fn new(spec: ProblemSpec, grid: &Grid) -> Result<Self> {
        let op = assemble_precision(&spec, grid)?;
        Self::from_operator(spec, op)
    }

    /// Uses Robin coefficient `epsilon` in the smoothing preconditioner.
    pub fn with_epsilon(spec: ProblemSpec, grid: &Grid, epsilon: f64) -> Result<Self> {
        let op = assemble_precision_with(&spec, grid, epsilon)?;
        Self::from_operator(spec, op)
    }

    pub fn from_operator(spec: ProblemSpec, op: DiscreteOperator) -> Result<Self> {
        spec.check_structure()?;
        spec.check_grid(op.grid())?;
        if Layout::for_problem(&spec, op.grid()) != *op.layout() {
            return Err(Error::DimensionMismatch("operator does not match problem".into()));
        }
        let terms = LocalTerms::new(&spec, op.grid());
        Ok(Self { spec, op, terms })
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn operator(&self) -> &DiscreteOperator {
        &self.op
    }

    pub fn grid(&self) -> &Grid {
        self.op.grid()
    }

    pub fn layout(&self) -> &Layout {
        self.op.layout()
    }

    /// Length of the unknown vector.
    pub fn size(&self) -> usize {
        self.op.size()
    }

    pub fn workspace(&self) -> GradWorkspace {
        let d = self.spec.dim();
        GradWorkspace {
            full: vec![0.0; self.grid().nodes() * d],
            node: vec![0.0; d],
            scratch: Scratch::new(d),
        }
    }

    /// `Û` of the path with free values `x`.
    pub fn log_u_unknowns(&self, x: &[f64]) -> f64 {
        let mut ws = self.workspace();
        self.layout().expand_into(x, &mut ws.full);
        self.terms.value(&ws.full, &mut ws.scratch)
    }

    /// `∇Û` with respect to the free values, written to `out`.
    pub fn grad_log_u_into(&self, x: &[f64], out: &mut [f64], ws: &mut GradWorkspace) {
        let d = self.spec.dim();
        let layout = self.layout();
        layout.expand_into(x, &mut ws.full);
        for (i, m) in (layout.first()..=layout.last()).enumerate() {
            self.terms.node_grad(m, &ws.full[m * d..(m + 1) * d], &mut ws.scratch, &mut ws.node);
            out[i * d..(i + 1) * d].copy_from_slice(&ws.node);
        }
    }

    pub fn log_density_unknowns(&self, x: &[f64]) -> f64 {
        let q = self.op.lambda().quadratic_form(x);
        -0.5 * q + dot(self.op.forcing(), x) + self.log_u_unknowns(x)
    }

    /// `∇log π = -Λx + g + ∇Û` with respect to the free values.
    pub fn grad_unknowns(&self, x: &[f64], out: &mut [f64]) {
        let mut ws = self.workspace();
        self.grad_log_u_into(x, out, &mut ws);
        let lx = self.op.lambda().mul_vec(x);
        for ((o, l), g) in out.iter_mut().zip(&lx).zip(self.op.forcing()) {
            *o += g - l;
        }
    }

    /// `Λ - D²Û`, the negative Hessian of the log target on the free values.
    /// The Hessian of `Û` is block diagonal and computed by differencing
    /// node gradients.
    pub fn neg_hessian_unknowns(&self, x: &[f64]) -> BlockTridiag {
        let d = self.spec.dim();
        let layout = self.layout();
        let mut ws = self.workspace();
        layout.expand_into(x, &mut ws.full);
        let mut out = self.op.lambda().clone();
        let mut h = vec![0.0; d * d];
        for (i, m) in (layout.first()..=layout.last()).enumerate() {
            self.terms.node_hess(m, &ws.full[m * d..(m + 1) * d], &mut ws.scratch, &mut h);
            h.iter_mut().for_each(|v| *v = -*v);
            out.add_diag(i, &h);
        }
        out
    }

    fn unknowns_of<'a>(&self, path: &'a Path) -> Result<&'a [f64]> {
        check_path(&self.spec, self.grid(), path)?;
        Ok(self.layout().restrict(path.values()))
    }

    /// `-½ xᵀΛx + gᵀx + Û(x)` with pinned nodes held at their fixed values.
    pub fn target_log_density(&self, path: &Path) -> Result<f64> {
        let x = self.unknowns_of(path)?;
        Ok(self.log_density_unknowns(x))
    }

    /// Gradient of [`Self::target_log_density`] with respect to the free
    /// node values, node-major.
    pub fn target_grad(&self, path: &Path) -> Result<Vec<f64>> {
        let x = self.unknowns_of(path)?;
        let mut out = vec![0.0; x.len()];
        self.grad_unknowns(x, &mut out);
        finite_all(&out, "target gradient")?;
        Ok(out)
    }
}

/// `log π` of a path for a problem on a grid; convenience over
/// [`TargetMeasure::target_log_density`].
pub fn target_log_density(target: &TargetMeasure, path: &Path) -> Result<f64> {
    target.target_log_density(path)
}

pub fn target_grad(target: &TargetMeasure, path: &Path) -> Result<Vec<f64>> {
    target.target_grad(path)
}
