//! Discrete precision operators, boundary value solves and Gaussian sampling.
//!
//! The prior part of every target is the Gaussian with density proportional
//! to `exp(-½ xᵀΛx + gᵀx)` on the free nodes. `Λ` is assembled from cell
//! energies `(1/du)|P x_{k+1} - N x_k|²_S` with `P = I - (du/2)A`,
//! `N = I + (du/2)A` and `S = (BBᵀ)⁻¹`, which discretizes
//! `½∫|x' - Ax|²_S du`. Natural boundary conditions come out of the energy
//! form; pinned nodes are eliminated and their values folded into `g`.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::linalg::{flat, BlockTridiag, CholeskyFactor};
use crate::measure::TargetMeasure;
use crate::model::{Grid, Path, ProblemKind, ProblemSpec};
use crate::{Error, Result, Rng};

/// Default Robin coefficient of the smoothing preconditioner.
pub const DEFAULT_EPSILON: f64 = 1.0;

/// Which grid nodes are free. Free nodes are the contiguous range
/// `first..=last`; the others are pinned.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    dim: usize,
    nodes: usize,
    first: usize,
    last: usize,
    start: Option<Vec<f64>>,
    end: Option<Vec<f64>>,
}

impl Layout {
    pub fn for_problem(spec: &ProblemSpec, grid: &Grid) -> Self {
        let nodes = grid.nodes();
        let (first, last) = match spec.kind() {
            ProblemKind::FreePath => (1, nodes - 1),
            ProblemKind::Bridge => (1, nodes - 2),
            ProblemKind::Smoothing => (0, nodes - 1),
        };
        Self {
            dim: spec.dim(),
            nodes,
            first,
            last,
            start: spec.start().map(<[f64]>::to_vec),
            end: spec.end().map(<[f64]>::to_vec),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn first(&self) -> usize {
        self.first
    }

    pub fn last(&self) -> usize {
        self.last
    }

    pub fn free_nodes(&self) -> usize {
        self.last + 1 - self.first
    }

    /// Length of the unknown vector.
    pub fn size(&self) -> usize {
        self.free_nodes() * self.dim
    }

    pub fn is_free(&self, node: usize) -> bool {
        (self.first..=self.last).contains(&node)
    }

    /// Pinned value of a node outside the free range.
    pub fn pinned(&self, node: usize) -> Option<&[f64]> {
        if node < self.first {
            self.start.as_deref()
        } else if node > self.last {
            self.end.as_deref()
        } else {
            None
        }
    }

    /// Writes the full node-major path for the unknowns `x`.
    pub fn expand_into(&self, x: &[f64], full: &mut [f64]) {
        let d = self.dim;
        if let Some(s) = &self.start {
            if self.first > 0 {
                full[..d].copy_from_slice(s);
            }
        }
        if let Some(e) = &self.end {
            if self.last + 1 < self.nodes {
                full[(self.nodes - 1) * d..].copy_from_slice(e);
            }
        }
        full[self.first * d..(self.last + 1) * d].copy_from_slice(x);
    }

    pub fn expand(&self, grid: &Grid, x: &[f64]) -> Path {
        let mut p = Path::zeros(grid, self.dim);
        self.expand_into(x, p.values_mut());
        p
    }

    /// The unknowns of a full path.
    pub fn restrict<'a>(&self, full: &'a [f64]) -> &'a [f64] {
        &full[self.first * self.dim..(self.last + 1) * self.dim]
    }
}

/// Assembled precision `Λ = Λ0 + Λ1` on the free nodes, and forcing `g`.
#[derive(Clone, Debug)]
pub struct DiscreteOperator {
    grid: Grid,
    layout: Layout,
    lambda: BlockTridiag,
    lambda0: BlockTridiag,
    lambda1: BlockTridiag,
    forcing: Vec<f64>,
    epsilon: f64,
}

impl DiscreteOperator {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn lambda(&self) -> &BlockTridiag {
        &self.lambda
    }

    /// Leading-order part used as preconditioner.
    pub fn lambda0(&self) -> &BlockTridiag {
        &self.lambda0
    }

    pub fn lambda1(&self) -> &BlockTridiag {
        &self.lambda1
    }

    pub fn forcing(&self) -> &[f64] {
        &self.forcing
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn size(&self) -> usize {
        self.layout.size()
    }

    /// Multiplies every block of `Λ` and `Λ0` by `factor`, keeping `g`.
    pub fn corrupted(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.lambda = self.lambda.scaled(factor);
        out.lambda0 = self.lambda0.scaled(factor);
        out.lambda1 = out.lambda.sub(&out.lambda0);
        out
    }
}

/// Cell energy blocks `(NᵀSN, PᵀSP, -NᵀSP) / du` for drift `a` and noise
/// precision `s`.
fn cell_blocks(a: &DMatrix<f64>, s: &DMatrix<f64>, du: f64) -> [Vec<f64>; 3] {
    let d = a.nrows();
    let id = DMatrix::<f64>::identity(d, d);
    let p = &id - a * (0.5 * du);
    let n = &id + a * (0.5 * du);
    let left = n.transpose() * s * &n / du;
    let right = p.transpose() * s * &p / du;
    let cross = -(n.transpose() * s * &p) / du;
    [flat(&left), flat(&right), flat(&cross)]
}

fn chain_energy(nodes: usize, a: &DMatrix<f64>, s: &DMatrix<f64>, du: f64) -> BlockTridiag {
    let d = a.nrows();
    let [left, right, cross] = cell_blocks(a, s, du);
    let mut full = BlockTridiag::zeros(nodes, d);
    for k in 0..nodes - 1 {
        full.add_diag(k, &left);
        full.add_diag(k + 1, &right);
        full.add_upper(k, &cross);
    }
    full
}

/// Forcing `-Λ_{free,pinned} x_pinned` from the full matrix.
fn pinned_forcing(full: &BlockTridiag, layout: &Layout) -> Vec<f64> {
    let d = layout.dim;
    let mut g = vec![0.0; layout.size()];
    if layout.first > 0 {
        let x0 = layout.pinned(layout.first - 1).expect("pinned start");
        let u = full.upper_block(layout.first - 1);
        // Row block `first`, column block `first - 1`: transpose of upper.
        for r in 0..d {
            g[r] -= (0..d).map(|c| u[c * d + r] * x0[c]).sum::<f64>();
        }
    }
    if layout.last + 1 < layout.nodes {
        let x1 = layout.pinned(layout.last + 1).expect("pinned end");
        let u = full.upper_block(layout.last);
        let off = (layout.free_nodes() - 1) * d;
        for r in 0..d {
            g[off + r] -= (0..d).map(|c| u[r * d + c] * x1[c]).sum::<f64>();
        }
    }
    g
}

/// Assembles `Λ`, its split and `g` with the default smoothing regularization.
pub fn assemble_precision(spec: &ProblemSpec, grid: &Grid) -> Result<DiscreteOperator> {
    assemble_precision_with(spec, grid, DEFAULT_EPSILON)
}

/// As [`assemble_precision`], with Robin coefficient `epsilon` for the
/// smoothing preconditioner `Λ0` (Neumann at `u = 0`,
/// `ω'(1) = -ε B11B11ᵀ ω(1)` at `u = 1`).
pub fn assemble_precision_with(
    spec: &ProblemSpec,
    grid: &Grid,
    epsilon: f64,
) -> Result<DiscreteOperator> {
    spec.check_structure()?;
    spec.check_grid(grid)?;
    let d = spec.dim();
    let du = grid.du();
    let nodes = grid.nodes();
    let layout = Layout::for_problem(spec, grid);
    let s = spec.noise_cov_inv();

    let (lambda, lambda0, forcing) = match spec {
        ProblemSpec::FreePath { matrices, .. } => {
            let full = chain_energy(nodes, matrices.a(), s, du);
            let g = pinned_forcing(&full, &layout);
            let lambda = full.restrict(layout.first, layout.last);
            (lambda.clone(), lambda, g)
        }
        ProblemSpec::Bridge { matrices, .. } => {
            let full = chain_energy(nodes, matrices.a(), s, du);
            let g = pinned_forcing(&full, &layout);
            let lead = chain_energy(nodes, &DMatrix::zeros(d, d), s, du);
            (
                full.restrict(layout.first, layout.last),
                lead.restrict(layout.first, layout.last),
                g,
            )
        }
        ProblemSpec::Smoothing { matrices, observations, .. } => {
            if !(epsilon > 0.0) || !epsilon.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "preconditioner epsilon must be positive, got {epsilon}"
                )));
            }
            let lead = chain_energy(nodes, &DMatrix::zeros(d, d), s, du);
            let a21 = matrices.a21();
            let rinv = matrices.obs_cov_inv();
            let obs_precision = flat(&(a21.transpose() * rinv * a21));
            let coupling = a21.transpose() * rinv;
            let mut lambda = lead.clone();
            let mut g = vec![0.0; nodes * d];
            for m in 0..nodes {
                let w = grid.weight(m);
                let scaled: Vec<f64> = obs_precision.iter().map(|v| w * v).collect();
                lambda.add_diag(m, &scaled);
                // Cell-midpoint pairing: cell k contributes ½ΔY_k to both ends.
                for cell in [m.checked_sub(1), (m < nodes - 1).then_some(m)].into_iter().flatten() {
                    let dy = observations.increment(cell);
                    for r in 0..d {
                        g[m * d + r] +=
                            0.5 * (0..dy.len()).map(|j| coupling[(r, j)] * dy[j]).sum::<f64>();
                    }
                }
            }
            let mut lambda0 = lead;
            let mut reg = vec![0.0; d * d];
            for r in 0..d {
                reg[r * d + r] = epsilon;
            }
            lambda0.add_diag(nodes - 1, &reg);
            (lambda, lambda0, g)
        }
    };
    let lambda1 = lambda.sub(&lambda0);
    Ok(DiscreteOperator {
        grid: *grid,
        layout,
        lambda,
        lambda0,
        lambda1,
        forcing,
        epsilon,
    })
}

/// Block Cholesky factor of a banded symmetric positive definite matrix.
pub fn cholesky_banded(matrix: &BlockTridiag) -> Result<CholeskyFactor> {
    matrix.cholesky()
}

/// Solves `Λx = rhs + g` on the free nodes and returns the full path with
/// pinned nodes reinstated. `rhs` has the length of the unknown vector.
pub fn solve_bvp(op: &DiscreteOperator, rhs: &[f64]) -> Result<Path> {
    if rhs.len() != op.size() {
        return Err(Error::DimensionMismatch(format!(
            "rhs has length {}, expected {}",
            rhs.len(),
            op.size()
        )));
    }
    let factor = op.lambda.cholesky()?;
    let mut x: Vec<f64> = rhs.iter().zip(&op.forcing).map(|(a, b)| a + b).collect();
    factor.solve_in_place(&mut x);
    Ok(op.layout.expand(&op.grid, &x))
}

/// Draws `z ~ N(0, Λ⁻¹)` for the matrix factored in `factor`, by solving
/// `Lᵀz = ξ` with standard normal `ξ`.
pub fn sample_from_precision(factor: &CholeskyFactor, rng: &mut Rng) -> Vec<f64> {
    let mut z = vec![0.0; factor.size()];
    sample_from_precision_into(factor, rng, &mut z);
    z
}

pub fn sample_from_precision_into(factor: &CholeskyFactor, rng: &mut Rng, z: &mut [f64]) {
    for v in z.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    factor.solve_upper_in_place(z);
}

/// Centre path of the target.
///
/// For free paths and bridges this is the solution of the linear boundary
/// value problem `Λm = g` (only boundary data enter). For smoothing it is the
/// maximizer of the discrete posterior density, found by damped Newton
/// iterations started from the linear observation-driven solution; in the
/// linear-Gaussian case it is the exact posterior mean.
pub fn mean_path(spec: &ProblemSpec, grid: &Grid) -> Result<Path> {
    let op = assemble_precision(spec, grid)?;
    match spec.kind() {
        ProblemKind::FreePath | ProblemKind::Bridge => solve_bvp(&op, &vec![0.0; op.size()]),
        ProblemKind::Smoothing => {
            let target = TargetMeasure::from_operator(spec.clone(), op)?;
            posterior_mode(&target)
        }
    }
}

/// Damped Newton ascent on the target log-density.
pub fn posterior_mode(target: &TargetMeasure) -> Result<Path> {
    let op = target.operator();
    let n = op.size();
    // Start from Λ0⁻¹ g, which is well defined even when Λ is singular.
    let mut x = op.lambda0().cholesky()?.solve(op.forcing());
    let mut grad = vec![0.0; n];
    let mut value = target.log_density_unknowns(&x);
    for _ in 0..100 {
        target.grad_unknowns(&x, &mut grad);
        let gnorm = grad.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if !gnorm.is_finite() {
            return Err(Error::NonFinite("gradient during mode search".into()));
        }
        if gnorm <= 1e-11 * (1.0 + op.forcing().iter().fold(0.0f64, |a, b| a.max(b.abs()))) {
            break;
        }
        let hess = target.neg_hessian_unknowns(&x);
        let mut shift = 0.0;
        let step = loop {
            let m = if shift > 0.0 { hess.shifted(shift, 1.0) } else { hess.clone() };
            match m.cholesky() {
                Ok(f) => break f.solve(&grad),
                Err(_) => {
                    shift = if shift == 0.0 { 1e-6 * (1.0 + hess.max_abs()) } else { shift * 10.0 };
                    if shift > 1e12 {
                        return Err(Error::Singular("mode search Hessian".into()));
                    }
                }
            }
        };
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + t * b).collect();
            let v = target.log_density_unknowns(&trial);
            if v.is_finite() && v >= value - 1e-12 * value.abs().max(1.0) {
                x = trial;
                value = v;
                break;
            }
            t *= 0.5;
            if t < 1e-10 {
                return Ok(op.layout().expand(op.grid(), &x));
            }
        }
    }
    Ok(op.layout().expand(op.grid(), &x))
}
