//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path as FsPath, PathBuf};

use pathlangevin::diagnostics::{compare_report, ergodic_average, iact, CompareReport, Estimate, Gates, Marginal};
use pathlangevin::model::{validate_problem, CheckStatus, ValidateOptions, ValidationReport};
use pathlangevin::operators::mean_path;
use pathlangevin::oracle::{importance_bridge, mala_oracle, rejection_bridge, MalaConfig, WeightedEnsemble};
use pathlangevin::sampler::{run_chain, ChainOutput, Functional};
use pathlangevin::{seeded_rng, Grid, Path, TargetMeasure};
use rayon::prelude::*;
use serde_json::{Map, Value};

use crate::config::{OraclePlan, RunPlan};
use crate::error::{CliError, Result};
use crate::output::{
    estimate_json, fmt_g, functionals_json, mean_path_csv, num, read_json, read_marginal, samples_csv,
    summary_from_json, to_json, weights_csv, write_text, NodeMoments,
};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "PATHLANGEVIN_THREADS";

fn create_dir(dir: &FsPath) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Runs the structural checks; failures are errors only in strict mode.
pub fn check_problem(plan: &RunPlan) -> Result<ValidationReport> {
    let options = ValidateOptions { strict: plan.strict, seed: plan.seed, ..Default::default() };
    let report = validate_problem(&plan.spec, &options)?;
    for c in report.failures() {
        log::warn!("condition `{}` failed: {}", c.name, c.detail);
    }
    Ok(report)
}

fn config_json(plan: &RunPlan) -> Value {
    serde_json::to_value(&plan.config).expect("config serializes")
}

fn target(plan: &RunPlan) -> Result<TargetMeasure> {
    Ok(TargetMeasure::with_epsilon(plan.spec.clone(), &plan.grid, plan.epsilon)?)
}

fn thread_count(jobs: usize) -> usize {
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(jobs).max(1)
}

fn series_estimate(series: &[f64], batches: usize) -> (Estimate, Option<f64>) {
    match ergodic_average(series, 0, batches) {
        Ok(e) => (e.estimate(), Some(iact(series))),
        Err(_) if !series.is_empty() => {
            let mean = series.iter().sum::<f64>() / series.len() as f64;
            (Estimate::new(mean, f64::NAN), None)
        }
        Err(_) => (Estimate::new(f64::NAN, f64::NAN), None),
    }
}

fn chain_moments(out: &ChainOutput) -> NodeMoments {
    let nodes = out.grid.nodes();
    NodeMoments {
        u: (0..nodes).map(|m| out.grid.node(m)).collect(),
        mean: (0..nodes).map(|m| (0..out.dim).map(|k| out.node_mean(m, k)).collect()).collect(),
        variance: (0..nodes).map(|m| (0..out.dim).map(|k| out.node_variance(m, k)).collect()).collect(),
    }
}

fn chain_functionals(out: &ChainOutput) -> BTreeMap<String, (Estimate, Option<f64>)> {
    out.functional_names
        .iter()
        .zip(&out.functional_series)
        .map(|(n, s)| (n.clone(), series_estimate(s, out.config.batches)))
        .collect()
}

fn chain_summary(plan: &RunPlan, out: &ChainOutput) -> Value {
    let mut m = Map::new();
    m.insert("kind".into(), Value::String("chain".into()));
    m.insert("config".into(), config_json(plan));
    m.insert("seed".into(), Value::from(out.seed));
    m.insert("scheme".into(), Value::String(out.config.scheme.name().into()));
    m.insert("diverged".into(), Value::Bool(out.diverged()));
    m.insert("divergence_step".into(), out.divergence.as_ref().map_or(Value::Null, |d| Value::from(d.step)));
    m.insert("recorded_steps".into(), Value::from(out.recorded_steps()));
    m.insert("samples".into(), Value::from(out.sample_steps.len()));
    m.insert("no_samples".into(), Value::Bool(out.sample_steps.is_empty()));
    m.insert("nodes".into(), chain_moments(out).to_json());
    m.insert("functionals".into(), functionals_json(&chain_functionals(out)));
    Value::Object(m)
}

fn pool(estimates: &[Estimate]) -> Estimate {
    let n = estimates.len() as f64;
    let value = estimates.iter().map(|e| e.value).sum::<f64>() / n;
    let se = estimates.iter().map(|e| e.std_error * e.std_error).sum::<f64>().sqrt() / n;
    Estimate::new(value, se)
}

fn pooled_summary(plan: &RunPlan, outs: &[ChainOutput]) -> Value {
    let first = &outs[0];
    let per: Vec<NodeMoments> = outs.iter().map(chain_moments).collect();
    let pick = |f: &dyn Fn(&NodeMoments) -> &Vec<Vec<Estimate>>| -> Vec<Vec<Estimate>> {
        (0..first.grid.nodes())
            .map(|m| (0..first.dim).map(|k| pool(&per.iter().map(|p| f(p)[m][k]).collect::<Vec<_>>())).collect())
            .collect()
    };
    let moments = NodeMoments { u: per[0].u.clone(), mean: pick(&|p| &p.mean), variance: pick(&|p| &p.variance) };
    let per_f: Vec<_> = outs.iter().map(chain_functionals).collect();
    let functionals: BTreeMap<String, (Estimate, Option<f64>)> = per_f[0]
        .keys()
        .map(|name| {
            let es: Vec<Estimate> = per_f.iter().map(|f| f[name].0).collect();
            let taus: Option<Vec<f64>> = per_f.iter().map(|f| f[name].1).collect();
            let tau = taus.map(|t| t.iter().sum::<f64>() / t.len() as f64);
            (name.clone(), (pool(&es), tau))
        })
        .collect();
    let diverged: Vec<Value> =
        outs.iter().filter_map(|o| o.divergence.as_ref().map(|d| Value::from(d.step))).collect();
    let mut m = Map::new();
    m.insert("kind".into(), Value::String("pooled".into()));
    m.insert("config".into(), config_json(plan));
    m.insert("seed".into(), Value::from(plan.seed));
    m.insert("chains".into(), Value::from(outs.len()));
    m.insert("scheme".into(), Value::String(first.config.scheme.name().into()));
    m.insert("diverged".into(), Value::Bool(!diverged.is_empty()));
    m.insert("divergence_step".into(), diverged.first().cloned().unwrap_or(Value::Null));
    let samples: usize = outs.iter().map(|o| o.sample_steps.len()).sum();
    m.insert("samples".into(), Value::from(samples));
    m.insert("no_samples".into(), Value::Bool(samples == 0));
    m.insert("nodes".into(), moments.to_json());
    m.insert("functionals".into(), functionals_json(&functionals));
    Value::Object(m)
}

fn write_chain(plan: &RunPlan, out: &ChainOutput, dir: &FsPath) -> Result<()> {
    create_dir(dir)?;
    write_text(&dir.join("samples.csv"), &samples_csv(&out.grid, out.dim, &out.samples))?;
    write_text(&dir.join("summary.json"), &to_json(&chain_summary(plan, out)))
}

/// `sample`: runs the configured chains and writes their outputs.
pub fn sample(plan: &RunPlan) -> Result<()> {
    check_problem(plan)?;
    let target = target(plan)?;
    let functionals = plan.monitored()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(plan.chains))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let outs: Vec<ChainOutput> = pool.install(|| {
        (0..plan.chains)
            .into_par_iter()
            .map(|i| run_chain(&target, &plan.sampler, plan.seed.wrapping_add(i as u64), None, &functionals))
            .collect::<std::result::Result<Vec<_>, _>>()
    })?;

    let dir = &plan.out_dir;
    if outs.len() == 1 {
        write_chain(plan, &outs[0], dir)?;
    } else {
        create_dir(dir)?;
        for (i, out) in outs.iter().enumerate() {
            write_chain(plan, out, &dir.join(format!("chain_{i}")))?;
        }
        let all: Vec<Path> = outs.iter().flat_map(|o| o.samples.iter().cloned()).collect();
        write_text(&dir.join("samples.csv"), &samples_csv(&plan.grid, plan.spec.dim(), &all))?;
        write_text(&dir.join("summary.json"), &to_json(&pooled_summary(plan, &outs)))?;
    }
    if let Some(d) = outs.iter().find_map(|o| o.divergence.as_ref()) {
        return Err(CliError::Diverged { step: d.step, dir: dir.clone() });
    }
    Ok(())
}

fn ensemble_moments(grid: &Grid, dim: usize, ens: &WeightedEnsemble) -> NodeMoments {
    NodeMoments {
        u: (0..grid.nodes()).map(|m| grid.node(m)).collect(),
        mean: (0..grid.nodes()).map(|m| (0..dim).map(|k| ens.node_mean(m, k)).collect()).collect(),
        variance: (0..grid.nodes()).map(|m| (0..dim).map(|k| ens.node_variance(m, k)).collect()).collect(),
    }
}

fn oracle_summary(plan: &RunPlan, method: &str, moments: &NodeMoments, functionals: &BTreeMap<String, (Estimate, Option<f64>)>, extra: Map<String, Value>) -> Value {
    let mut m = extra;
    m.insert("kind".into(), Value::String(method.into()));
    m.insert("config".into(), config_json(plan));
    m.insert("seed".into(), Value::from(plan.seed));
    m.insert("nodes".into(), moments.to_json());
    m.insert("functionals".into(), functionals_json(functionals));
    Value::Object(m)
}

fn write_ensemble(plan: &RunPlan, method: &str, ens: &WeightedEnsemble, weighted: bool, mut extra: Map<String, Value>) -> Result<()> {
    let dir = &plan.out_dir;
    create_dir(dir)?;
    let dim = plan.spec.dim();
    let paths: Vec<Path> = (0..ens.len()).map(|i| ens.path(i)).collect();
    write_text(&dir.join("samples.csv"), &samples_csv(&plan.grid, dim, &paths))?;
    if weighted {
        write_text(&dir.join("weights.csv"), &weights_csv(ens.log_weights()))?;
    }
    let functionals: BTreeMap<String, (Estimate, Option<f64>)> = plan
        .monitored()?
        .iter()
        .map(|f| (f.name().to_string(), (ens.expectation(|p| f.eval(p)), None)))
        .collect();
    extra.insert("samples".into(), Value::from(ens.len()));
    extra.insert("effective_size".into(), num(ens.effective_size()));
    let summary = oracle_summary(plan, method, &ensemble_moments(&plan.grid, dim, ens), &functionals, extra);
    write_text(&dir.join("summary.json"), &to_json(&summary))
}

/// `oracle`: runs the configured reference sampler.
pub fn oracle(plan: &RunPlan) -> Result<()> {
    let Some(oracle) = &plan.oracle else {
        return Err(CliError::Config("the configuration has no [oracle] section".into()));
    };
    check_problem(plan)?;
    let mut rng = seeded_rng(plan.seed);
    match oracle {
        OraclePlan::Importance { n } => {
            let target = target(plan)?;
            let ens = importance_bridge(&target, *n, &mut rng)?;
            write_ensemble(plan, "importance", &ens, true, Map::new())
        }
        OraclePlan::Rejection { n, tol, substeps } => {
            let r = rejection_bridge(&plan.spec, &plan.grid, *tol, *n, *substeps, &mut rng)?;
            let mut extra = Map::new();
            extra.insert("acceptance_rate".into(), num(r.acceptance_rate));
            extra.insert("attempts".into(), Value::from(r.attempts));
            write_ensemble(plan, "rejection", &r.ensemble, false, extra)
        }
        OraclePlan::Mala { steps, delta, metric, burn_in, thin } => {
            let target = target(plan)?;
            let dim = plan.spec.dim();
            let nodes = plan.grid.nodes();
            let mut functionals: Vec<Functional> =
                (0..nodes).flat_map(|m| (0..dim).map(move |k| Functional::node_value(m, k))).collect();
            let monitored = plan.monitored()?;
            functionals.extend(monitored.iter().cloned());
            let cfg = MalaConfig { delta: *delta, steps: *steps, burn_in: *burn_in, thin: *thin, metric: *metric };
            let out = mala_oracle(&target, &cfg, &functionals, &mut rng)?;
            let stride = nodes * dim;
            let count = out.functional_series.first().map_or(0, Vec::len);
            let paths: Vec<Path> = (0..count)
                .map(|i| {
                    let v: Vec<f64> = (0..stride).map(|j| out.functional_series[j][i]).collect();
                    Path::from_values(&plan.grid, dim, v).expect("path shape")
                })
                .collect();
            let dir = &plan.out_dir;
            create_dir(dir)?;
            write_text(&dir.join("samples.csv"), &samples_csv(&plan.grid, dim, &paths))?;
            let moments = NodeMoments {
                u: (0..nodes).map(|m| plan.grid.node(m)).collect(),
                mean: (0..nodes).map(|m| (0..dim).map(|k| out.moments.mean_estimate(m * dim + k)).collect()).collect(),
                variance: (0..nodes)
                    .map(|m| (0..dim).map(|k| out.moments.variance_estimate(m * dim + k)).collect())
                    .collect(),
            };
            let fmap: BTreeMap<String, (Estimate, Option<f64>)> = monitored
                .iter()
                .enumerate()
                .map(|(i, f)| (f.name().to_string(), series_estimate(&out.functional_series[stride + i], 40)))
                .collect();
            let mut extra = Map::new();
            extra.insert("acceptance_rate".into(), num(out.acceptance_rate));
            extra.insert("samples".into(), Value::from(count));
            write_text(&dir.join("summary.json"), &to_json(&oracle_summary(plan, "mala", &moments, &fmap, extra)))
        }
    }
}

/// Node and component of a functional named `x[m][k]`.
fn node_of(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("x[")?.strip_suffix(']')?;
    let (m, k) = rest.split_once("][")?;
    Some((m.parse().ok()?, k.parse().ok()?))
}

fn gates_of(summary: &Value) -> Gates {
    let d = Gates::default();
    let c = summary.get("config").and_then(|c| c.get("compare"));
    let get = |k: &str, dflt: f64| c.and_then(|c| c.get(k)).and_then(Value::as_f64).unwrap_or(dflt);
    Gates { max_z: get("max_z", d.max_z), max_ks: get("max_ks", d.max_ks) }
}

pub fn report_json(report: &CompareReport) -> Value {
    let functionals: Vec<Value> = report
        .functionals
        .iter()
        .map(|r| {
            let mut m = Map::new();
            m.insert("name".into(), Value::String(r.name.clone()));
            m.insert("chain".into(), estimate_json(&r.chain));
            m.insert("reference".into(), estimate_json(&r.reference));
            m.insert("z".into(), num(r.z));
            m.insert("pass".into(), Value::Bool(r.pass));
            Value::Object(m)
        })
        .collect();
    let marginals: Vec<Value> = report
        .marginals
        .iter()
        .map(|r| {
            let mut m = Map::new();
            m.insert("name".into(), Value::String(r.name.clone()));
            m.insert("ks".into(), num(r.ks));
            m.insert("pass".into(), Value::Bool(r.pass));
            Value::Object(m)
        })
        .collect();
    let mut gates = Map::new();
    gates.insert("max_z".into(), num(report.gates.max_z));
    gates.insert("max_ks".into(), num(report.gates.max_ks));
    let mut m = Map::new();
    m.insert("gates".into(), Value::Object(gates));
    m.insert("functionals".into(), Value::Array(functionals));
    m.insert("marginals".into(), Value::Array(marginals));
    m.insert("max_z".into(), num(report.max_z()));
    m.insert("passed".into(), Value::Bool(report.passed()));
    Value::Object(m)
}

/// `compare`: joins a chain run and an oracle run into `compare.json`.
pub fn compare(chain_dir: &FsPath, oracle_dir: &FsPath, out_dir: &FsPath) -> Result<CompareReport> {
    let cpath = chain_dir.join("summary.json");
    let opath = oracle_dir.join("summary.json");
    let cjson = read_json(&cpath)?;
    let ojson = read_json(&opath)?;
    let chain = summary_from_json(&cpath, &cjson)?;
    let reference = summary_from_json(&opath, &ojson)?;
    let mut nodes: Vec<(usize, usize)> = chain.functionals.keys().filter_map(|n| node_of(n)).collect();
    if nodes.is_empty() {
        nodes.push((chain.nodes.len() / 2, 0));
    }
    let mut marginals: Vec<(String, Marginal, Marginal)> = Vec::new();
    for (m, k) in nodes {
        let a = read_marginal(chain_dir, m, k)?;
        let b = read_marginal(oracle_dir, m, k)?;
        if !a.samples.is_empty() && !b.samples.is_empty() {
            marginals.push((format!("x[{m}][{k}]"), a, b));
        }
    }
    let report = compare_report(&chain, &reference, &marginals, gates_of(&cjson))?;
    create_dir(out_dir)?;
    write_text(&out_dir.join("compare.json"), &to_json(&report_json(&report)))?;
    Ok(report)
}

/// `mean-path`: writes the centre path of the problem.
pub fn write_mean_path(plan: &RunPlan) -> Result<PathBuf> {
    check_problem(plan)?;
    let m = mean_path(&plan.spec, &plan.grid)?;
    create_dir(&plan.out_dir)?;
    let path = plan.out_dir.join("mean_path.csv");
    write_text(&path, &mean_path_csv(&plan.grid, &m))?;
    Ok(path)
}

/// `validate`: runs the condition checks and renders them as text.
pub fn validate(plan: &RunPlan) -> Result<(ValidationReport, String)> {
    let report = check_problem(plan)?;
    let mut text = String::new();
    for c in &report.checks {
        let value = c.value.map_or_else(|| "-".to_string(), fmt_g);
        let status = match c.status {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Skipped => "skipped",
        };
        text.push_str(&format!("{:<18} {status:<8} {value:<16} {}\n", c.name, c.detail));
    }
    Ok((report, text))
}
