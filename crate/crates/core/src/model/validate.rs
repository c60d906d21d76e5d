use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

use super::{LogAlpha, ProblemSpec};
use crate::{seeded_rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "fail",
            CheckStatus::Skipped => "skipped",
        })
    }
}

/// Outcome of one numerical condition check.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionCheck {
    /// `"growth"`, `"linear_stability"` or `"initial_law"`.
    pub name: &'static str,
    pub status: CheckStatus,
    /// The statistic the verdict is based on.
    pub value: Option<f64>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<ConditionCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ConditionCheck> {
        self.checks.iter().filter(|c| c.status == CheckStatus::Fail)
    }

    pub fn get(&self, name: &str) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidateOptions {
    /// Turn failed checks into errors.
    pub strict: bool,
    /// Seed for the random sphere directions.
    pub seed: u64,
    /// Random directions per radius, on top of the coordinate axes.
    pub directions: usize,
    /// Radius scale `c` of the initial-law sweep, run at `2c` and `10c`.
    pub initial_law_radius: f64,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self {
            strict: false,
            seed: 0,
            directions: 64,
            initial_law_radius: 1.0,
        }
    }
}

fn sphere_points(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(seed);
    let mut out = Vec::with_capacity(2 * dim + count);
    for k in 0..dim {
        for s in [1.0, -1.0] {
            let mut e = vec![0.0; dim];
            e[k] = s;
            out.push(e);
        }
    }
    while out.len() < 2 * dim + count {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

/// Numerically checks the growth condition on the potential, the linear
/// stability condition when the potential is quadratic at infinity, and the
/// tail condition on `log α` for smoothing problems.
///
/// A malformed noise matrix is always an error; failed checks are errors only
/// in strict mode.
pub fn validate_problem(spec: &ProblemSpec, options: &ValidateOptions) -> Result<ValidationReport> {
    spec.check_structure()?;
    let cov = spec.noise_cov();
    if cov.clone().cholesky().is_none() {
        return Err(Error::Singular("noise covariance".into()));
    }
    let d = spec.dim();
    let dirs = sphere_points(d, options.directions, options.seed);
    let potential = spec.potential();
    let p = potential.degree();
    let mut checks = Vec::new();

    // Growth: V(Rξ) / R^{2p} bounded below by a positive constant.
    let mut c0 = f64::INFINITY;
    for r in [10.0f64, 100.0] {
        let scale = r.powi(2 * p as i32);
        for xi in &dirs {
            let x: Vec<f64> = xi.iter().map(|v| r * v).collect();
            c0 = c0.min(potential.value(&x) / scale);
        }
    }
    checks.push(ConditionCheck {
        name: "growth",
        status: if c0 > 0.0 && c0.is_finite() { CheckStatus::Pass } else { CheckStatus::Fail },
        value: Some(c0),
        detail: format!("min V(Rx)/R^{} over |x| = 1, R in {{10, 100}}", 2 * p),
    });

    // Linear stability: QA + AᵀQ - Q BBᵀ Q < 0 when p = 1.
    let linear = match spec {
        ProblemSpec::Smoothing { .. } => None,
        _ => Some(spec.drift_matrix()),
    };
    match (linear, p) {
        (Some(a), 1) => {
            let q = match potential.quadratic_matrix() {
                Some(q) => q.clone(),
                None => {
                    // Leading quadratic form read off the Hessian far out.
                    let mut q = DMatrix::zeros(d, d);
                    for xi in &dirs {
                        let x: Vec<f64> = xi.iter().map(|v| 100.0 * v).collect();
                        q += potential.hess(&x);
                    }
                    q / dirs.len() as f64
                }
            };
            let m = &q * &a + a.transpose() * &q - &q * cov * &q;
            let m = (&m + m.transpose()) * 0.5;
            let top = SymmetricEigen::new(m).eigenvalues.max();
            checks.push(ConditionCheck {
                name: "linear_stability",
                status: if top < 0.0 { CheckStatus::Pass } else { CheckStatus::Fail },
                value: Some(top),
                detail: "largest eigenvalue of QA + AᵀQ - Q BBᵀ Q".into(),
            });
        }
        _ => checks.push(ConditionCheck {
            name: "linear_stability",
            status: CheckStatus::Skipped,
            value: None,
            detail: if p == 1 {
                "not applicable to smoothing".into()
            } else {
                format!("only for p = 1; potential grows like |x|^{}", 2 * p)
            },
        }),
    }

    // Initial law: max{log α(x), ½⟨∇log α(x), x⟩} ≤ -ε|x|² for some ε > 0.
    if let ProblemSpec::Smoothing { log_alpha, .. } = spec {
        let eps = initial_law_margin(spec, log_alpha, &dirs, options.initial_law_radius);
        checks.push(ConditionCheck {
            name: "initial_law",
            status: if eps > 0.0 { CheckStatus::Pass } else { CheckStatus::Fail },
            value: Some(eps),
            detail: format!(
                "min of -max(log a, <grad log a, x>/2)/|x|^2 at |x| in {{{}, {}}}",
                2.0 * options.initial_law_radius,
                10.0 * options.initial_law_radius
            ),
        });
    } else {
        checks.push(ConditionCheck {
            name: "initial_law",
            status: CheckStatus::Skipped,
            value: None,
            detail: "only for smoothing".into(),
        });
    }

    let report = ValidationReport { checks };
    if options.strict {
        if let Some(fail) = report.failures().next() {
            return Err(Error::ConditionViolated {
                name: fail.name.to_string(),
                detail: format!("{} = {:?}", fail.detail, fail.value),
            });
        }
    }
    Ok(report)
}

fn initial_law_margin(spec: &ProblemSpec, log_alpha: &LogAlpha, dirs: &[Vec<f64>], c: f64) -> f64 {
    let potential = spec.potential();
    let mut eps = f64::INFINITY;
    for r in [2.0 * c, 10.0 * c] {
        for xi in dirs {
            let x: Vec<f64> = xi.iter().map(|v| r * v).collect();
            let value = log_alpha.value(potential, &x);
            let g = log_alpha.grad(potential, &x);
            let radial = 0.5 * g.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            let worst = value.max(radial);
            let margin = -worst / (r * r);
            eps = eps.min(if margin.is_nan() { f64::NEG_INFINITY } else { margin });
        }
    }
    eps
}
