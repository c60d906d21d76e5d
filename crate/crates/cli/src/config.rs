//! Run configuration: a TOML file describing one problem, its sampler, an
//! optional oracle and comparison gates.

use std::fs;
use std::path::{Path as FsPath, PathBuf};

use nalgebra::DMatrix;
use pathlangevin::diagnostics::Gates;
use pathlangevin::model::{LogAlpha, MatrixSet, Observations, Potential, ProblemKind, ProblemSpec, SmoothingMatrices};
use pathlangevin::oracle::MalaMetric;
use pathlangevin::sampler::Functional;
use pathlangevin::{Grid, SamplerConfig, Scheme};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::observations::load_observations;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindName {
    FreePath,
    Bridge,
    Smoothing,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialConfig {
    #[default]
    Zero,
    Quadratic { q: Vec<Vec<f64>> },
    DoubleWell { a: f64, b: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LogAlphaConfig {
    Stationary,
    Gaussian { mean: Vec<f64>, precision: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: KindName,
    /// Number of grid intervals `M`.
    pub intervals: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a21: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b11: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b22: Option<Vec<Vec<f64>>>,
    /// CSV file, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observations: Option<String>,
    /// Boundary coefficient of the smoothing preconditioner.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub potential: PotentialConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_alpha: Option<LogAlphaConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    SemiImplicit,
    Preconditioned,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<SchemeName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thin: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batches: Option<usize>,
    /// Sup-norm bound; the default scales with the mean path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_paths: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chains: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functionals: Option<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMethod {
    Importance,
    Rejection,
    Mala,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Identity,
    Prior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub method: OracleMethod,
    /// Ensemble size (importance, rejection) or number of MALA steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substeps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thin: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_z: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_ks: Option<f64>,
}

/// The file as written by the user. After [`RunConfig::fill_defaults`] every
/// optional field that has a default is set, which makes the serialized
/// form canonical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strict: Option<bool>,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSection>,
    #[serde(default)]
    pub compare: CompareSection,
}

/// Misspellings and synonyms mapped to the key they most likely mean.
const SYNONYMS: &[(&str, &str)] = &[
    ("stepsize", "delta"),
    ("step_size", "delta"),
    ("dt", "delta"),
    ("h", "delta"),
    ("iterations", "steps"),
    ("n_steps", "steps"),
    ("burnin", "burn_in"),
    ("thinning", "thin"),
    ("m", "intervals"),
    ("n", "samples"),
    ("x0", "start"),
    ("x1", "end"),
];

/// Adds a "did you mean" hint to serde's unknown-field messages.
fn suggest(message: &str) -> Option<String> {
    let rest = message.split("unknown field `").nth(1)?;
    let key = rest.split('`').next()?;
    let expected: Vec<&str> = rest.split('`').skip(2).step_by(2).collect();
    let lower = key.to_ascii_lowercase();
    let guess = SYNONYMS
        .iter()
        .find(|(k, v)| *k == lower && (expected.is_empty() || expected.contains(v)))
        .map(|(_, v)| v.to_string())
        .or_else(|| {
            expected
                .iter()
                .map(|e| (strsim::jaro_winkler(&lower, e), *e))
                .filter(|(s, _)| *s > 0.8)
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, e)| e.to_string())
        })?;
    Some(format!("unknown key `{key}`; did you mean `{guess}`?"))
}

fn parse_matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(CliError::Config(format!("`{name}` must be a non-empty rectangular array of rows")));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn config_err(e: pathlangevin::Error) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let mut msg = e.to_string();
            if let Some(hint) = suggest(e.message()) {
                msg.push_str("\nhelp: ");
                msg.push_str(&hint);
            }
            CliError::Config(msg)
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable in TOML")
    }

    /// Signal dimension implied by the problem data.
    pub fn dim(&self) -> Result<usize> {
        let p = &self.problem;
        let from_data = p
            .start
            .as_ref()
            .map(Vec::len)
            .or_else(|| p.b11.as_ref().map(Vec::len))
            .or_else(|| p.a.as_ref().map(Vec::len))
            .or(match &p.potential {
                PotentialConfig::Quadratic { q } => Some(q.len()),
                PotentialConfig::Zero | PotentialConfig::DoubleWell { .. } => None,
            })
            .unwrap_or(1);
        if from_data == 0 {
            return Err(CliError::Config("problem dimension must be at least 1".into()));
        }
        Ok(from_data)
    }

    fn grid(&self) -> Result<Grid> {
        Grid::new(self.problem.intervals).map_err(config_err)
    }

    /// Sets every defaulted field.
    pub fn fill_defaults(&mut self) -> Result<()> {
        let grid = self.grid()?;
        let d = self.dim()?;
        self.seed.get_or_insert(0);
        self.strict.get_or_insert(false);
        let p = &mut self.problem;
        match p.kind {
            KindName::FreePath | KindName::Bridge => {
                p.a.get_or_insert_with(|| to_rows(&DMatrix::zeros(d, d)));
                p.b.get_or_insert_with(|| to_rows(&DMatrix::identity(d, d)));
            }
            KindName::Smoothing => {
                p.b11.get_or_insert_with(|| to_rows(&DMatrix::identity(d, d)));
                p.epsilon.get_or_insert(pathlangevin::operators::DEFAULT_EPSILON);
                p.log_alpha.get_or_insert(LogAlphaConfig::Stationary);
            }
        }

        let s = &mut self.sampler;
        let scheme = *s.scheme.get_or_insert(SchemeName::SemiImplicit);
        if scheme == SchemeName::SemiImplicit {
            s.theta.get_or_insert(0.5);
        }
        let core_scheme = match scheme {
            SchemeName::SemiImplicit => Scheme::SemiImplicit { theta: s.theta.unwrap_or(0.5) },
            SchemeName::Preconditioned => Scheme::Preconditioned,
        };
        s.delta.get_or_insert_with(|| SamplerConfig::default_delta(core_scheme, &grid));
        let steps = *s.steps.get_or_insert(100_000);
        let burn_in = *s.burn_in.get_or_insert(steps / 10);
        // About a thousand recorded paths by default.
        s.thin.get_or_insert((steps.saturating_sub(burn_in) / 1000).max(1));
        s.batches.get_or_insert(40);
        s.record_paths.get_or_insert(true);
        s.chains.get_or_insert(1);
        let m = grid.intervals();
        s.functionals.get_or_insert_with(|| {
            vec![
                format!("x[{}][0]", m / 4),
                format!("x[{}][0]", m / 2),
                format!("x[{}][0]", 3 * m / 4),
                "int_x[0]".to_string(),
                "int_x2[0]".to_string(),
            ]
        });

        if let Some(o) = &mut self.oracle {
            match o.method {
                OracleMethod::Importance => {
                    o.samples.get_or_insert(10_000);
                }
                OracleMethod::Rejection => {
                    o.samples.get_or_insert(1_000);
                    o.tol.get_or_insert(0.05);
                    o.substeps.get_or_insert(4);
                }
                OracleMethod::Mala => {
                    let steps = *o.samples.get_or_insert(100_000);
                    o.delta.get_or_insert(0.1);
                    o.metric.get_or_insert(MetricName::Prior);
                    let burn = *o.burn_in.get_or_insert(steps / 10);
                    o.thin.get_or_insert((steps.saturating_sub(burn) / 1000).max(1));
                }
            }
        }
        let defaults = Gates::default();
        self.compare.max_z.get_or_insert(defaults.max_z);
        self.compare.max_ks.get_or_insert(defaults.max_ks);
        Ok(())
    }
}

/// Parses a functional name of the form `x[m][k]`, `int_x[k]` or `int_x2[k]`.
pub fn parse_functional(name: &str, grid: &Grid, dim: usize) -> Result<Functional> {
    let bad = || CliError::Config(format!("unknown functional `{name}`; use x[m][k], int_x[k] or int_x2[k]"));
    let index = |s: &str| s.trim_end_matches(']').parse::<usize>().map_err(|_| bad());
    let f = if let Some(rest) = name.strip_prefix("x[") {
        let mut parts = rest.splitn(2, "][");
        let m = index(parts.next().ok_or_else(bad)?)?;
        let k = index(parts.next().ok_or_else(bad)?)?;
        if m > grid.intervals() || k >= dim {
            return Err(CliError::Config(format!("functional `{name}` is outside the grid or dimension")));
        }
        Functional::node_value(m, k)
    } else if let Some(rest) = name.strip_prefix("int_x2[") {
        let k = index(rest)?;
        if k >= dim {
            return Err(bad());
        }
        Functional::time_average_sq(grid, k)
    } else if let Some(rest) = name.strip_prefix("int_x[") {
        let k = index(rest)?;
        if k >= dim {
            return Err(bad());
        }
        Functional::time_average(grid, k)
    } else {
        return Err(bad());
    };
    Ok(f)
}

/// Reference sampler settings resolved from [`OracleSection`].
#[derive(Clone, Debug, PartialEq)]
pub enum OraclePlan {
    Importance { n: usize },
    Rejection { n: usize, tol: f64, substeps: usize },
    Mala { steps: u64, delta: f64, metric: MalaMetric, burn_in: u64, thin: u64 },
}

/// Everything a subcommand needs, parsed and validated.
#[derive(Clone, Debug)]
pub struct RunPlan {
    /// Canonical configuration with defaults filled.
    pub config: RunConfig,
    pub spec: ProblemSpec,
    pub grid: Grid,
    pub sampler: SamplerConfig,
    pub epsilon: f64,
    pub chains: usize,
    pub functionals: Vec<String>,
    pub oracle: Option<OraclePlan>,
    pub gates: Gates,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub strict: bool,
}

impl PartialEq for RunPlan {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.out_dir == other.out_dir
            && self.seed == other.seed
            && self.strict == other.strict
    }
}

impl RunPlan {
    /// Canonical TOML of the plan: re-parsing it yields an identical plan.
    pub fn canonical_toml(&self) -> String {
        self.config.to_toml()
    }

    pub fn monitored(&self) -> Result<Vec<Functional>> {
        let d = self.spec.dim();
        self.functionals.iter().map(|n| parse_functional(n, &self.grid, d)).collect()
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strict: bool,
    pub chains: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

pub fn parse_config(path: &FsPath, overrides: &Overrides) -> Result<RunPlan> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let base = path.parent().unwrap_or(FsPath::new("."));
    parse_config_str(&text, base, overrides).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Parses config text; relative paths inside resolve against `base`.
pub fn parse_config_str(text: &str, base: &FsPath, overrides: &Overrides) -> Result<RunPlan> {
    let mut config = RunConfig::from_toml(text)?;
    if let Some(seed) = overrides.seed {
        config.seed = Some(seed);
    }
    if overrides.strict {
        config.strict = Some(true);
    }
    if let Some(c) = overrides.chains {
        config.sampler.chains = Some(c);
    }
    config.fill_defaults()?;
    build_plan(config, base, overrides.out_dir.clone().unwrap_or_else(|| PathBuf::from("out")))
}

fn required<T: Clone>(value: &Option<T>, key: &str, kind: &str) -> Result<T> {
    value.clone().ok_or_else(|| CliError::Config(format!("`problem.{key}` is required for {kind} problems")))
}

fn build_spec(config: &RunConfig, grid: &Grid, base: &FsPath) -> Result<ProblemSpec> {
    let p = &config.problem;
    let d = config.dim()?;
    let potential = match &p.potential {
        PotentialConfig::Zero => Ok(Potential::zero(d)),
        PotentialConfig::Quadratic { q } => Potential::quadratic(parse_matrix("potential.q", q)?),
        PotentialConfig::DoubleWell { a, b } => Potential::double_well(d, *a, *b),
    }
    .map_err(config_err)?;
    let kind = match p.kind {
        KindName::FreePath => "free_path",
        KindName::Bridge => "bridge",
        KindName::Smoothing => "smoothing",
    };
    match p.kind {
        KindName::FreePath | KindName::Bridge => {
            for (key, v) in [("a21", &p.a21), ("b11", &p.b11), ("b22", &p.b22)] {
                if v.is_some() {
                    return Err(CliError::Config(format!("`problem.{key}` only applies to smoothing problems")));
                }
            }
            let a = parse_matrix("problem.a", &required(&p.a, "a", kind)?)?;
            let b = parse_matrix("problem.b", &required(&p.b, "b", kind)?)?;
            let matrices = MatrixSet::new(a, b).map_err(config_err)?;
            let start = required(&p.start, "start", kind)?;
            if p.kind == KindName::FreePath {
                if p.end.is_some() {
                    return Err(CliError::Config("`problem.end` only applies to bridges".into()));
                }
                ProblemSpec::free_path(matrices, potential, start)
            } else {
                ProblemSpec::bridge(matrices, potential, start, required(&p.end, "end", kind)?)
            }
            .map_err(config_err)
        }
        KindName::Smoothing => {
            let a21 = parse_matrix("problem.a21", &required(&p.a21, "a21", kind)?)?;
            let b11 = parse_matrix("problem.b11", &required(&p.b11, "b11", kind)?)?;
            let b22 = parse_matrix("problem.b22", &required(&p.b22, "b22", kind)?)?;
            let matrices = SmoothingMatrices::new(a21, b11, b22).map_err(config_err)?;
            let log_alpha = match required(&p.log_alpha, "log_alpha", kind)? {
                LogAlphaConfig::Stationary => LogAlpha::Stationary,
                LogAlphaConfig::Gaussian { mean, precision } => {
                    LogAlpha::Gaussian { mean, precision: parse_matrix("log_alpha.precision", &precision)? }
                }
            };
            let observations = match &p.observations {
                Some(file) => load_observations(&base.join(file), grid)?,
                None => Observations::zeros(grid, matrices.obs_dim()),
            };
            if observations.obs_dim() != matrices.obs_dim() {
                return Err(CliError::Config(format!(
                    "observations have {} columns but A21 has {} rows",
                    observations.obs_dim(),
                    matrices.obs_dim()
                )));
            }
            ProblemSpec::smoothing(matrices, potential, log_alpha, observations).map_err(config_err)
        }
    }
}

fn build_plan(config: RunConfig, base: &FsPath, out_dir: PathBuf) -> Result<RunPlan> {
    let grid = config.grid()?;
    let spec = build_spec(&config, &grid, base)?;
    if spec.kind() == ProblemKind::Smoothing && config.problem.start.is_some() {
        return Err(CliError::Config("`problem.start` does not apply to smoothing problems".into()));
    }
    let s = &config.sampler;
    let scheme = match s.scheme.expect("filled") {
        SchemeName::SemiImplicit => Scheme::SemiImplicit { theta: s.theta.expect("filled") },
        SchemeName::Preconditioned => {
            if s.theta.is_some() {
                return Err(CliError::Config("`sampler.theta` only applies to the semi_implicit scheme".into()));
            }
            Scheme::Preconditioned
        }
    };
    let mut sampler = SamplerConfig::new(scheme, s.delta.expect("filled"), s.steps.expect("filled"));
    sampler.burn_in = s.burn_in.expect("filled");
    sampler.thin = s.thin.expect("filled");
    sampler.batches = s.batches.expect("filled");
    sampler.divergence_threshold = s.divergence_threshold;
    sampler.record_paths = s.record_paths.expect("filled");
    sampler.validate().map_err(config_err)?;
    let chains = s.chains.expect("filled");
    if chains == 0 {
        return Err(CliError::Config("`sampler.chains` must be at least 1".into()));
    }
    let functionals = s.functionals.clone().expect("filled");
    for f in &functionals {
        parse_functional(f, &grid, spec.dim())?;
    }

    let oracle = config.oracle.as_ref().map(|o| match o.method {
            OracleMethod::Importance => OraclePlan::Importance { n: o.samples.expect("filled") as usize },
            OracleMethod::Rejection => OraclePlan::Rejection {
                n: o.samples.expect("filled") as usize,
                tol: o.tol.expect("filled"),
                substeps: o.substeps.expect("filled"),
            },
            OracleMethod::Mala => OraclePlan::Mala {
                steps: o.samples.expect("filled"),
                delta: o.delta.expect("filled"),
                metric: match o.metric.expect("filled") {
                    MetricName::Identity => MalaMetric::Identity,
                    MetricName::Prior => MalaMetric::Prior,
                },
                burn_in: o.burn_in.expect("filled"),
                thin: o.thin.expect("filled"),
            },
        });
    let gates = Gates { max_z: config.compare.max_z.expect("filled"), max_ks: config.compare.max_ks.expect("filled") };
    Ok(RunPlan {
        epsilon: config.problem.epsilon.unwrap_or(pathlangevin::operators::DEFAULT_EPSILON),
        seed: config.seed.expect("filled"),
        strict: config.strict.expect("filled"),
        config,
        spec,
        grid,
        sampler,
        chains,
        functionals,
        oracle,
        gates,
        out_dir,
    })
}
