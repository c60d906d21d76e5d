use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::linalg::flat;
use crate::{Error, Result};

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Writes a vector (or a row-major matrix) evaluated at the first argument.
pub type VectorFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `(x, Σ, out)`: writes `T_k = Σ_ij Σ_ij ∂³V/∂x_k∂x_i∂x_j`.
pub type ContractFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Parameters of the potentials with closed-form derivatives.
#[derive(Clone, Debug, PartialEq)]
pub enum BuiltinPotential {
    /// `V(x) = ½ xᵀQx` with `Q` symmetric positive definite.
    Quadratic { q: DMatrix<f64> },
    /// `V(x) = (a/4)|x|⁴ - (b/2)|x|²`.
    DoubleWell { dim: usize, a: f64, b: f64 },
}

/// Validates the parameters and returns the potential.
pub fn builtin_potential(kind: BuiltinPotential) -> Result<Potential> {
    match kind {
        BuiltinPotential::Quadratic { q } => Potential::quadratic(q),
        BuiltinPotential::DoubleWell { dim, a, b } => Potential::double_well(dim, a, b),
    }
}

/// A potential `V: ℝᵈ → ℝ` with its first three derivatives.
#[derive(Clone)]
pub enum Potential {
    Quadratic { q: DMatrix<f64> },
    DoubleWell { dim: usize, a: f64, b: f64 },
    Custom(CustomPotential),
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Potential::Quadratic { q } => f.debug_struct("Quadratic").field("q", q).finish(),
            Potential::DoubleWell { dim, a, b } => f
                .debug_struct("DoubleWell")
                .field("dim", dim)
                .field("a", a)
                .field("b", b)
                .finish(),
            Potential::Custom(c) => f
                .debug_struct("Custom")
                .field("dim", &c.dim)
                .field("degree", &c.degree)
                .finish(),
        }
    }
}

impl Potential {
    pub fn quadratic(q: DMatrix<f64>) -> Result<Self> {
        if !q.is_square() || q.nrows() == 0 {
            return Err(Error::DimensionMismatch("quadratic Q must be square".into()));
        }
        if (&q - q.transpose()).amax() > 1e-12 * (1.0 + q.amax()) {
            return Err(Error::InvalidParameter("quadratic Q must be symmetric".into()));
        }
        if q.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("quadratic Q".into()));
        }
        Ok(Potential::Quadratic { q })
    }

    /// `V ≡ 0`, so the drift is linear.
    pub fn zero(dim: usize) -> Self {
        Potential::Quadratic { q: DMatrix::zeros(dim, dim) }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Potential::Quadratic { q } if q.iter().all(|v| *v == 0.0))
    }

    pub fn double_well(dim: usize, a: f64, b: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("double well needs dim >= 1".into()));
        }
        if !(a > 0.0) || !(b > 0.0) || !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "double well needs a, b > 0 (got a={a}, b={b})"
            )));
        }
        Ok(Potential::DoubleWell { dim, a, b })
    }

    pub fn dim(&self) -> usize {
        match self {
            Potential::Quadratic { q } => q.nrows(),
            Potential::DoubleWell { dim, .. } => *dim,
            Potential::Custom(c) => c.dim,
        }
    }

    /// Degree `p` of the leading `2p`-homogeneous term.
    pub fn degree(&self) -> u32 {
        match self {
            Potential::Quadratic { .. } => 1,
            Potential::DoubleWell { .. } => 2,
            Potential::Custom(c) => c.degree,
        }
    }

    /// `Q` when the potential is exactly `½ xᵀQx`.
    pub fn quadratic_matrix(&self) -> Option<&DMatrix<f64>> {
        match self {
            Potential::Quadratic { q } => Some(q),
            _ => None,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Potential::Quadratic { q } => {
                let d = q.nrows();
                let mut s = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        s += x[i] * q[(i, j)] * x[j];
                    }
                }
                0.5 * s
            }
            Potential::DoubleWell { a, b, .. } => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                0.25 * a * r2 * r2 - 0.5 * b * r2
            }
            Potential::Custom(c) => (c.value)(x),
        }
    }

    pub fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Potential::Quadratic { q } => {
                let d = q.nrows();
                for i in 0..d {
                    out[i] = (0..d).map(|j| q[(i, j)] * x[j]).sum();
                }
            }
            Potential::DoubleWell { a, b, .. } => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                for (o, v) in out.iter_mut().zip(x) {
                    *o = (a * r2 - b) * v;
                }
            }
            Potential::Custom(c) => c.grad_into(x, out),
        }
    }

    /// Row-major Hessian.
    pub fn hess_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Potential::Quadratic { q } => out.copy_from_slice(&flat(q)),
            Potential::DoubleWell { a, b, dim } => {
                let d = *dim;
                let r2: f64 = x.iter().map(|v| v * v).sum();
                for i in 0..d {
                    for j in 0..d {
                        let delta = if i == j { 1.0 } else { 0.0 };
                        out[i * d + j] = a * (r2 * delta + 2.0 * x[i] * x[j]) - b * delta;
                    }
                }
            }
            Potential::Custom(c) => c.hess_into(x, out),
        }
    }

    /// `T_k = Σ_ij Σ_ij ∂³V/∂x_k∂x_i∂x_j` for a row-major `Σ`.
    pub fn third_contract_into(&self, x: &[f64], sigma: &[f64], out: &mut [f64]) {
        match self {
            Potential::Quadratic { .. } => out.iter_mut().for_each(|v| *v = 0.0),
            Potential::DoubleWell { a, dim, .. } => {
                // ∂³V/∂k∂i∂j = 2a (x_k δ_ij + x_i δ_jk + x_j δ_ik)
                let d = *dim;
                let trace: f64 = (0..d).map(|i| sigma[i * d + i]).sum();
                for k in 0..d {
                    let sx: f64 = (0..d).map(|j| sigma[k * d + j] * x[j]).sum();
                    let sxt: f64 = (0..d).map(|i| sigma[i * d + k] * x[i]).sum();
                    out[k] = 2.0 * a * (x[k] * trace + sx + sxt);
                }
            }
            Potential::Custom(c) => c.third_contract_into(x, sigma, out),
        }
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.grad_into(x, &mut out);
        out
    }

    pub fn hess(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d * d];
        self.hess_into(x, &mut out);
        DMatrix::from_row_slice(d, d, &out)
    }

    pub fn third_contract(&self, x: &[f64], sigma: &DMatrix<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.third_contract_into(x, &flat(sigma), &mut out);
        out
    }
}

/// User-supplied potential. Missing derivatives fall back to central finite
/// differences of the next-lower derivative.
#[derive(Clone)]
pub struct CustomPotential {
    dim: usize,
    degree: u32,
    value: ScalarFn,
    grad: Option<VectorFn>,
    hess: Option<VectorFn>,
    third: Option<ContractFn>,
}

impl CustomPotential {
    pub fn new(dim: usize, degree: u32, value: ScalarFn) -> Self {
        Self {
            dim,
            degree,
            value,
            grad: None,
            hess: None,
            third: None,
        }
    }

    pub fn with_grad(mut self, grad: VectorFn) -> Self {
        self.grad = Some(grad);
        self
    }

    pub fn with_hess(mut self, hess: VectorFn) -> Self {
        self.hess = Some(hess);
        self
    }

    pub fn with_third_contract(mut self, third: ContractFn) -> Self {
        self.third = Some(third);
        self
    }

    fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.grad {
            Some(g) => g(x, out),
            None => fd_gradient(&*self.value, x, 1e-5, out),
        }
    }

    fn hess_into(&self, x: &[f64], out: &mut [f64]) {
        match (&self.hess, &self.grad) {
            (Some(h), _) => h(x, out),
            (None, Some(_)) => fd_jacobian(&|p, o| self.grad_into(p, o), x, 1e-5, out),
            (None, None) => fd_hessian(&*self.value, x, 1e-4, out),
        }
    }

    fn third_contract_into(&self, x: &[f64], sigma: &[f64], out: &mut [f64]) {
        if let Some(t) = &self.third {
            return t(x, sigma, out);
        }
        let d = self.dim;
        // Contract first, then differentiate the scalar Σ:D²V.
        let step = if self.hess.is_some() {
            1e-5
        } else if self.grad.is_some() {
            1e-3
        } else {
            5e-3
        };
        let mut h = vec![0.0; d * d];
        let mut p = x.to_vec();
        for k in 0..d {
            let h_k = step * (1.0 + x[k].abs());
            p[k] = x[k] + h_k;
            self.hess_into(&p, &mut h);
            let plus: f64 = h.iter().zip(sigma).map(|(a, b)| a * b).sum();
            p[k] = x[k] - h_k;
            self.hess_into(&p, &mut h);
            let minus: f64 = h.iter().zip(sigma).map(|(a, b)| a * b).sum();
            p[k] = x[k];
            out[k] = (plus - minus) / (2.0 * h_k);
        }
    }
}

/// Finite-difference derivatives of a scalar function.
#[derive(Clone, Debug, PartialEq)]
pub struct FdDerivatives {
    pub grad: Vec<f64>,
    pub hess: DMatrix<f64>,
    /// `third[(k * d + i) * d + j] ≈ ∂³V/∂x_k∂x_i∂x_j`.
    pub third: Vec<f64>,
}

impl FdDerivatives {
    pub fn third_contract(&self, sigma: &DMatrix<f64>) -> Vec<f64> {
        let d = self.grad.len();
        (0..d)
            .map(|k| {
                let mut s = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        s += sigma[(i, j)] * self.third[(k * d + i) * d + j];
                    }
                }
                s
            })
            .collect()
    }
}

/// Central-difference gradient, Hessian and third-derivative tensor of `v`
/// at `x`. The gradient and Hessian use step `h`; the third derivatives use
/// `max(h, 5e-3)` to keep cancellation error in check.
pub fn finite_difference_derivatives(
    v: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    h: f64,
) -> Result<FdDerivatives> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step h must be positive, got {h}")));
    }
    let d = x.len();
    let checked = |p: &[f64]| -> Result<f64> {
        let val = v(p);
        if val.is_finite() {
            Ok(val)
        } else {
            Err(Error::NonFinite(format!("potential at {p:?}")))
        }
    };
    // Probe the stencil once so non-finite values surface as errors.
    let mut p = x.to_vec();
    checked(&p)?;
    for k in 0..d {
        for s in [-2.0, -1.0, 1.0, 2.0] {
            p[k] = x[k] + s * h.max(5e-3);
            checked(&p)?;
            p[k] = x[k] + s * h;
            checked(&p)?;
        }
        p[k] = x[k];
    }

    let mut grad = vec![0.0; d];
    fd_gradient(v, x, h, &mut grad);
    let mut hess = vec![0.0; d * d];
    fd_hessian(v, x, h, &mut hess);

    let h3 = h.max(5e-3);
    let mut third = vec![0.0; d * d * d];
    let mut hp = vec![0.0; d * d];
    let mut hm = vec![0.0; d * d];
    for k in 0..d {
        p[k] = x[k] + h3;
        fd_hessian(v, &p, h3, &mut hp);
        p[k] = x[k] - h3;
        fd_hessian(v, &p, h3, &mut hm);
        p[k] = x[k];
        for ij in 0..d * d {
            third[k * d * d + ij] = (hp[ij] - hm[ij]) / (2.0 * h3);
        }
    }
    let all_finite = grad.iter().chain(&hess).chain(&third).all(|v| v.is_finite());
    if !all_finite {
        return Err(Error::NonFinite("finite-difference derivatives".into()));
    }
    Ok(FdDerivatives {
        grad,
        hess: DMatrix::from_row_slice(d, d, &hess),
        third,
    })
}

fn fd_gradient(v: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64, out: &mut [f64]) {
    let mut p = x.to_vec();
    for k in 0..x.len() {
        p[k] = x[k] + h;
        let plus = v(&p);
        p[k] = x[k] - h;
        let minus = v(&p);
        p[k] = x[k];
        out[k] = (plus - minus) / (2.0 * h);
    }
}

fn fd_hessian(v: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64, out: &mut [f64]) {
    let d = x.len();
    let mut p = x.to_vec();
    let center = v(x);
    for i in 0..d {
        p[i] = x[i] + h;
        let plus = v(&p);
        p[i] = x[i] - h;
        let minus = v(&p);
        p[i] = x[i];
        out[i * d + i] = (plus - 2.0 * center + minus) / (h * h);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| {
                p[i] = x[i] + si * h;
                p[j] = x[j] + sj * h;
                let val = v(&p);
                p[i] = x[i];
                p[j] = x[j];
                val
            };
            let val =
                (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                    / (4.0 * h * h);
            out[i * d + j] = val;
            out[j * d + i] = val;
        }
    }
}

/// Symmetrized central-difference Jacobian of a vector field.
fn fd_jacobian(g: &dyn Fn(&[f64], &mut [f64]), x: &[f64], h: f64, out: &mut [f64]) {
    let d = x.len();
    let mut p = x.to_vec();
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    for k in 0..d {
        let step = h * (1.0 + x[k].abs());
        p[k] = x[k] + step;
        g(&p, &mut plus);
        p[k] = x[k] - step;
        g(&p, &mut minus);
        p[k] = x[k];
        for i in 0..d {
            out[i * d + k] = (plus[i] - minus[i]) / (2.0 * step);
        }
    }
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (out[i * d + j] + out[j * d + i]);
            out[i * d + j] = s;
            out[j * d + i] = s;
        }
    }
}

/// Log of `α = e^V ζ`, where `ζ` is the density of the signal's initial value
/// in the smoothing problem.
#[derive(Clone)]
pub enum LogAlpha {
    /// `ζ ∝ e^{-2V}` (the invariant law of the signal), so `log α = -V`.
    Stationary,
    /// `ζ = N(mean, precision⁻¹)`, so `log α = V - ½(x-mean)ᵀP(x-mean)`.
    Gaussian {
        mean: Vec<f64>,
        precision: DMatrix<f64>,
    },
    Custom { value: ScalarFn, grad: VectorFn },
}

impl fmt::Debug for LogAlpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogAlpha::Stationary => f.write_str("Stationary"),
            LogAlpha::Gaussian { mean, precision } => f
                .debug_struct("Gaussian")
                .field("mean", mean)
                .field("precision", precision)
                .finish(),
            LogAlpha::Custom { .. } => f.write_str("Custom"),
        }
    }
}

impl LogAlpha {
    pub fn value(&self, potential: &Potential, x: &[f64]) -> f64 {
        match self {
            LogAlpha::Stationary => -potential.value(x),
            LogAlpha::Gaussian { mean, precision } => {
                potential.value(x) - 0.5 * mahalanobis(precision, mean, x)
            }
            LogAlpha::Custom { value, .. } => value(x),
        }
    }

    pub fn grad_into(&self, potential: &Potential, x: &[f64], out: &mut [f64]) {
        match self {
            LogAlpha::Stationary => {
                potential.grad_into(x, out);
                out.iter_mut().for_each(|v| *v = -*v);
            }
            LogAlpha::Gaussian { mean, precision } => {
                potential.grad_into(x, out);
                let d = x.len();
                for i in 0..d {
                    out[i] -= (0..d).map(|j| precision[(i, j)] * (x[j] - mean[j])).sum::<f64>();
                }
            }
            LogAlpha::Custom { grad, .. } => grad(x, out),
        }
    }

    pub fn grad(&self, potential: &Potential, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.grad_into(potential, x, &mut out);
        out
    }

    /// Row-major Hessian of `log α`.
    pub fn hess_into(&self, potential: &Potential, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        match self {
            LogAlpha::Stationary => {
                potential.hess_into(x, out);
                out.iter_mut().for_each(|v| *v = -*v);
            }
            LogAlpha::Gaussian { precision, .. } => {
                potential.hess_into(x, out);
                for i in 0..d {
                    for j in 0..d {
                        out[i * d + j] -= precision[(i, j)];
                    }
                }
            }
            LogAlpha::Custom { grad, .. } => fd_jacobian(&|p, o| grad(p, o), x, 1e-5, out),
        }
    }

    /// `(mean, covariance)` of `ζ` when it is Gaussian and known in closed form.
    pub fn gaussian_initial_law(&self, potential: &Potential) -> Option<(Vec<f64>, DMatrix<f64>)> {
        match self {
            LogAlpha::Gaussian { mean, precision } => {
                Some((mean.clone(), precision.clone().try_inverse()?))
            }
            LogAlpha::Stationary => {
                let q = potential.quadratic_matrix()?;
                let cov = (q * 2.0).try_inverse()?;
                Some((vec![0.0; q.nrows()], cov))
            }
            LogAlpha::Custom { .. } => None,
        }
    }
}

fn mahalanobis(p: &DMatrix<f64>, mean: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            s += (x[i] - mean[i]) * p[(i, j)] * (x[j] - mean[j]);
        }
    }
    s
}
