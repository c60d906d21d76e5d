use nalgebra::DMatrix;

use super::{Grid, LogAlpha, Potential};
use crate::{Error, Result};

/// Largest condition number accepted for a noise matrix.
const MAX_CONDITION: f64 = 1e12;

fn check_invertible(name: &str, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !b.is_square() || b.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!("{name} must be square and non-empty")));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(name.to_string()));
    }
    let sv = b.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(min > 0.0) || max / min > MAX_CONDITION {
        return Err(Error::Singular(format!(
            "{name} is not invertible (condition number {:.3e})",
            max / min
        )));
    }
    Ok(b * b.transpose())
}

fn inverse_spd(name: &str, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(name.to_string()))?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Drift and noise matrices of `dX = AX du + f(X) du + B dW`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixSet {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    bbt: DMatrix<f64>,
    bbt_inv: DMatrix<f64>,
}

impl MatrixSet {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let bbt = check_invertible("B", &b)?;
        if a.shape() != b.shape() {
            return Err(Error::DimensionMismatch(format!(
                "A is {}x{} but B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("A".into()));
        }
        let bbt_inv = inverse_spd("BBᵀ", &bbt)?;
        Ok(Self { a, b, bbt, bbt_inv })
    }

    /// `A = 0`, `B = I`.
    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(DMatrix::zeros(dim, dim), DMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn bbt(&self) -> &DMatrix<f64> {
        &self.bbt
    }

    pub fn bbt_inv(&self) -> &DMatrix<f64> {
        &self.bbt_inv
    }
}

/// Signal/observation matrices of the smoothing problem
/// `dX = f(X) du + B11 dWˣ`, `dY = A21 X du + B22 dWʸ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothingMatrices {
    a21: DMatrix<f64>,
    b11: DMatrix<f64>,
    b22: DMatrix<f64>,
    signal_cov: DMatrix<f64>,
    signal_cov_inv: DMatrix<f64>,
    obs_cov: DMatrix<f64>,
    obs_cov_inv: DMatrix<f64>,
}

impl SmoothingMatrices {
    pub fn new(a21: DMatrix<f64>, b11: DMatrix<f64>, b22: DMatrix<f64>) -> Result<Self> {
        let signal_cov = check_invertible("B11", &b11)?;
        let obs_cov = check_invertible("B22", &b22)?;
        if a21.nrows() != b22.nrows() || a21.ncols() != b11.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "A21 must be {}x{}, got {}x{}",
                b22.nrows(),
                b11.nrows(),
                a21.nrows(),
                a21.ncols()
            )));
        }
        if a21.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("A21".into()));
        }
        let signal_cov_inv = inverse_spd("B11B11ᵀ", &signal_cov)?;
        let obs_cov_inv = inverse_spd("B22B22ᵀ", &obs_cov)?;
        Ok(Self {
            a21,
            b11,
            b22,
            signal_cov,
            signal_cov_inv,
            obs_cov,
            obs_cov_inv,
        })
    }

    pub fn signal_dim(&self) -> usize {
        self.b11.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.b22.nrows()
    }

    pub fn a21(&self) -> &DMatrix<f64> {
        &self.a21
    }

    pub fn b11(&self) -> &DMatrix<f64> {
        &self.b11
    }

    pub fn b22(&self) -> &DMatrix<f64> {
        &self.b22
    }

    /// `B11 B11ᵀ`.
    pub fn signal_cov(&self) -> &DMatrix<f64> {
        &self.signal_cov
    }

    pub fn signal_cov_inv(&self) -> &DMatrix<f64> {
        &self.signal_cov_inv
    }

    /// `B22 B22ᵀ`.
    pub fn obs_cov(&self) -> &DMatrix<f64> {
        &self.obs_cov
    }

    pub fn obs_cov_inv(&self) -> &DMatrix<f64> {
        &self.obs_cov_inv
    }

    /// The full block system `A = [[0, 0], [A21, 0]]`, `B = diag(B11, B22)`.
    pub fn joint(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = self.signal_dim();
        let m = self.obs_dim();
        let mut a = DMatrix::zeros(d + m, d + m);
        a.view_mut((d, 0), (m, d)).copy_from(&self.a21);
        let mut b = DMatrix::zeros(d + m, d + m);
        b.view_mut((0, 0), (d, d)).copy_from(&self.b11);
        b.view_mut((d, d), (m, m)).copy_from(&self.b22);
        (a, b)
    }
}

/// Observation increments `ΔY_m = Y(u_{m+1}) - Y(u_m)`, one per grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Observations {
    obs_dim: usize,
    increments: Vec<f64>,
}

impl Observations {
    /// `increments` is cell-major: `obs_dim` values per cell.
    pub fn from_increments(grid: &Grid, obs_dim: usize, increments: Vec<f64>) -> Result<Self> {
        if obs_dim == 0 {
            return Err(Error::InvalidParameter("observation dimension must be positive".into()));
        }
        if increments.len() != grid.intervals() * obs_dim {
            return Err(Error::DimensionMismatch(format!(
                "expected {} increments of dimension {obs_dim}, got {} values",
                grid.intervals(),
                increments.len()
            )));
        }
        if increments.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation increments".into()));
        }
        Ok(Self { obs_dim, increments })
    }

    /// Node values `Y(u_0), ..., Y(u_M)`, node-major, with `Y(u_0) = 0`.
    pub fn from_node_values(grid: &Grid, obs_dim: usize, values: &[f64]) -> Result<Self> {
        if obs_dim == 0 || values.len() != grid.nodes() * obs_dim {
            return Err(Error::DimensionMismatch(format!(
                "expected {} node values of dimension {obs_dim}, got {} values",
                grid.nodes(),
                values.len()
            )));
        }
        if values[..obs_dim].iter().any(|v| *v != 0.0) {
            return Err(Error::InvalidParameter("observation path must start at Y(0) = 0".into()));
        }
        let increments = values
            .windows(2 * obs_dim)
            .step_by(obs_dim)
            .flat_map(|w| (0..obs_dim).map(move |j| w[obs_dim + j] - w[j]))
            .collect();
        Self::from_increments(grid, obs_dim, increments)
    }

    /// No observed signal: all increments zero.
    pub fn zeros(grid: &Grid, obs_dim: usize) -> Self {
        Self {
            obs_dim,
            increments: vec![0.0; grid.intervals() * obs_dim],
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn cells(&self) -> usize {
        self.increments.len() / self.obs_dim
    }

    pub fn increment(&self, cell: usize) -> &[f64] {
        &self.increments[cell * self.obs_dim..(cell + 1) * self.obs_dim]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Cumulative node values, starting at zero.
    pub fn node_values(&self) -> Vec<f64> {
        let mut out = vec![0.0; (self.cells() + 1) * self.obs_dim];
        for c in 0..self.cells() {
            for j in 0..self.obs_dim {
                out[(c + 1) * self.obs_dim + j] = out[c * self.obs_dim + j] + self.increment(c)[j];
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProblemKind {
    FreePath,
    Bridge,
    Smoothing,
}

impl ProblemKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemKind::FreePath => "free_path",
            ProblemKind::Bridge => "bridge",
            ProblemKind::Smoothing => "smoothing",
        }
    }
}

/// One of the three conditioned path measures.
#[derive(Clone, Debug)]
pub enum ProblemSpec {
    /// Paths of the SDE started at `start`.
    FreePath {
        matrices: MatrixSet,
        potential: Potential,
        start: Vec<f64>,
    },
    /// Paths pinned at `start` (u = 0) and `end` (u = 1).
    Bridge {
        matrices: MatrixSet,
        potential: Potential,
        start: Vec<f64>,
        end: Vec<f64>,
    },
    /// Signal paths conditioned on an observation path.
    Smoothing {
        matrices: SmoothingMatrices,
        potential: Potential,
        log_alpha: LogAlpha,
        observations: Observations,
    },
}

fn check_point(name: &str, x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "{name} has dimension {}, expected {dim}",
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(name.to_string()));
    }
    Ok(())
}

impl ProblemSpec {
    pub fn free_path(matrices: MatrixSet, potential: Potential, start: Vec<f64>) -> Result<Self> {
        let spec = ProblemSpec::FreePath { matrices, potential, start };
        spec.check_structure()?;
        Ok(spec)
    }

    pub fn bridge(
        matrices: MatrixSet,
        potential: Potential,
        start: Vec<f64>,
        end: Vec<f64>,
    ) -> Result<Self> {
        let spec = ProblemSpec::Bridge { matrices, potential, start, end };
        spec.check_structure()?;
        Ok(spec)
    }

    pub fn smoothing(
        matrices: SmoothingMatrices,
        potential: Potential,
        log_alpha: LogAlpha,
        observations: Observations,
    ) -> Result<Self> {
        let spec = ProblemSpec::Smoothing { matrices, potential, log_alpha, observations };
        spec.check_structure()?;
        Ok(spec)
    }

    /// Dimension and finiteness checks shared by all constructors.
    pub fn check_structure(&self) -> Result<()> {
        let d = self.dim();
        if self.potential().dim() != d {
            return Err(Error::DimensionMismatch(format!(
                "potential has dimension {}, problem has {d}",
                self.potential().dim()
            )));
        }
        match self {
            ProblemSpec::FreePath { start, .. } => check_point("start point", start, d),
            ProblemSpec::Bridge { start, end, .. } => {
                check_point("start point", start, d)?;
                check_point("end point", end, d)
            }
            ProblemSpec::Smoothing { matrices, observations, log_alpha, .. } => {
                if observations.obs_dim() != matrices.obs_dim() {
                    return Err(Error::DimensionMismatch(format!(
                        "observations have dimension {}, B22 has {}",
                        observations.obs_dim(),
                        matrices.obs_dim()
                    )));
                }
                if let LogAlpha::Gaussian { mean, precision } = log_alpha {
                    check_point("initial mean", mean, d)?;
                    if precision.shape() != (d, d) {
                        return Err(Error::DimensionMismatch("initial precision".into()));
                    }
                    if precision.clone().cholesky().is_none() {
                        return Err(Error::NotPositiveDefinite("initial precision".into()));
                    }
                }
                Ok(())
            }
        }
    }

    /// Checks that the observations cover `grid`.
    pub fn check_grid(&self, grid: &Grid) -> Result<()> {
        if let ProblemSpec::Smoothing { observations, .. } = self {
            if observations.cells() != grid.intervals() {
                return Err(Error::DimensionMismatch(format!(
                    "{} observation increments for a grid of {} cells",
                    observations.cells(),
                    grid.intervals()
                )));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> ProblemKind {
        match self {
            ProblemSpec::FreePath { .. } => ProblemKind::FreePath,
            ProblemSpec::Bridge { .. } => ProblemKind::Bridge,
            ProblemSpec::Smoothing { .. } => ProblemKind::Smoothing,
        }
    }

    /// Dimension `d` of the sampled path.
    pub fn dim(&self) -> usize {
        match self {
            ProblemSpec::FreePath { matrices, .. } | ProblemSpec::Bridge { matrices, .. } => {
                matrices.dim()
            }
            ProblemSpec::Smoothing { matrices, .. } => matrices.signal_dim(),
        }
    }

    pub fn potential(&self) -> &Potential {
        match self {
            ProblemSpec::FreePath { potential, .. }
            | ProblemSpec::Bridge { potential, .. }
            | ProblemSpec::Smoothing { potential, .. } => potential,
        }
    }

    /// Linear drift `A` of the sampled path; zero for smoothing.
    pub fn drift_matrix(&self) -> DMatrix<f64> {
        match self {
            ProblemSpec::FreePath { matrices, .. } | ProblemSpec::Bridge { matrices, .. } => {
                matrices.a().clone()
            }
            ProblemSpec::Smoothing { matrices, .. } => {
                DMatrix::zeros(matrices.signal_dim(), matrices.signal_dim())
            }
        }
    }

    /// Noise covariance `BBᵀ` of the sampled path (`B11B11ᵀ` for smoothing).
    pub fn noise_cov(&self) -> &DMatrix<f64> {
        match self {
            ProblemSpec::FreePath { matrices, .. } | ProblemSpec::Bridge { matrices, .. } => {
                matrices.bbt()
            }
            ProblemSpec::Smoothing { matrices, .. } => matrices.signal_cov(),
        }
    }

    pub fn noise_cov_inv(&self) -> &DMatrix<f64> {
        match self {
            ProblemSpec::FreePath { matrices, .. } | ProblemSpec::Bridge { matrices, .. } => {
                matrices.bbt_inv()
            }
            ProblemSpec::Smoothing { matrices, .. } => matrices.signal_cov_inv(),
        }
    }

    pub fn start(&self) -> Option<&[f64]> {
        match self {
            ProblemSpec::FreePath { start, .. } | ProblemSpec::Bridge { start, .. } => Some(start),
            ProblemSpec::Smoothing { .. } => None,
        }
    }

    pub fn end(&self) -> Option<&[f64]> {
        match self {
            ProblemSpec::Bridge { end, .. } => Some(end),
            _ => None,
        }
    }

    /// Replaces the potential, keeping everything else.
    pub fn with_potential(&self, potential: Potential) -> Result<Self> {
        let mut spec = self.clone();
        match &mut spec {
            ProblemSpec::FreePath { potential: p, .. }
            | ProblemSpec::Bridge { potential: p, .. }
            | ProblemSpec::Smoothing { potential: p, .. } => *p = potential,
        }
        spec.check_structure()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_set_inverse() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]);
        let m = MatrixSet::new(DMatrix::zeros(2, 2), b).unwrap();
        let id = m.bbt_inv() * m.bbt();
        assert!((id - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn singular_noise_rejected() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(MatrixSet::new(DMatrix::zeros(2, 2), b), Err(Error::Singular(_))));
        let z = DMatrix::zeros(1, 1);
        assert!(SmoothingMatrices::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1), z).is_err());
    }

    #[test]
    fn joint_block_structure() {
        let s = SmoothingMatrices::new(
            DMatrix::from_element(1, 1, 3.0),
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 0.5),
        )
        .unwrap();
        let (a, b) = s.joint();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 3.0, 0.0]));
        assert_eq!(b, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]));
    }

    #[test]
    fn node_values_are_differenced() {
        let grid = Grid::new(4).unwrap();
        let y: Vec<f64> = (0..5).map(|m| grid.node(m)).collect();
        let obs = Observations::from_node_values(&grid, 1, &y).unwrap();
        assert_eq!(obs.increments(), &[0.25, 0.25, 0.25, 0.25]);
        assert_eq!(obs.node_values(), y);
    }

    #[test]
    fn observation_shape_errors() {
        let grid = Grid::new(4).unwrap();
        assert!(Observations::from_increments(&grid, 1, vec![0.0; 3]).is_err());
        assert!(Observations::from_node_values(&grid, 1, &[1.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn endpoint_dimension_checked() {
        let v = Potential::double_well(1, 1.0, 1.0).unwrap();
        let m = MatrixSet::standard(1).unwrap();
        assert!(ProblemSpec::bridge(m.clone(), v.clone(), vec![0.0], vec![0.0, 1.0]).is_err());
        assert!(ProblemSpec::bridge(m, v, vec![0.0], vec![1.0]).is_ok());
    }
}
