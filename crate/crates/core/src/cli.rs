//! Command implementations behind the `gradadapt` binary. Each command
//! writes machine-readable output whose first line carries a schema tag.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::controller::DEFAULT_CAP;
use crate::estimator::{cosine, theorem, Metric};
use crate::harness::{run_episode, HarnessError, PolicySpec, Scenario, Trace, TraceFormat};
use crate::knobs::Configuration;

pub const SUMMARY_SCHEMA: &str = "gradadapt-summary/1";
pub const GRADCHECK_SCHEMA: &str = "gradadapt-gradcheck/1";
pub const THEOREM_SCHEMA: &str = "gradadapt-theorem/1";
pub const COMPARE_SCHEMA: &str = "gradadapt-compare/1";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    /// A check ran to completion and missed its threshold.
    #[error("{0}")]
    Threshold(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Harness(_) => 1,
            CliError::Threshold(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Harness(HarnessError::Io {
            path: "<stdout>".into(),
            source: e,
        })
    }
}

/// Command-line values that replace scenario settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
    pub intervals: Option<usize>,
    pub mcu_block: Option<usize>,
    pub no_reuse: bool,
}

impl Overrides {
    pub fn apply(&self, s: &mut Scenario) {
        if let Some(a) = self.alpha {
            s.controller.alpha = a;
        }
        if let Some(l) = self.lambda {
            s.controller.lambda = l;
        }
        if let Some(seed) = self.seed {
            s.scene.seed = seed;
        }
        if let Some(t) = self.intervals {
            s.episode.intervals = t;
        }
        if let Some(b) = self.mcu_block {
            s.estimator.mcu_block = b;
        }
        if self.no_reuse {
            s.estimator.reuse_dnngrad = false;
        }
    }
}

/// Everything one invocation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub scenarios: Vec<PathBuf>,
    pub policies: Vec<String>,
    pub overrides: Overrides,
    pub out: Option<PathBuf>,
    pub format: TraceFormat,
    pub threshold: Option<f64>,
}

impl RunSpec {
    pub fn new(scenario: impl Into<PathBuf>) -> Self {
        RunSpec {
            scenarios: vec![scenario.into()],
            policies: Vec::new(),
            overrides: Overrides::default(),
            out: None,
            format: TraceFormat::Csv,
            threshold: None,
        }
    }

    fn single_scenario(&self) -> Result<&Path, CliError> {
        match self.scenarios.as_slice() {
            [one] => Ok(one),
            [] => Err(CliError::Usage("--scenario is required".into())),
            _ => Err(CliError::Usage("this command takes exactly one --scenario".into())),
        }
    }
}

/// Loads a scenario, applies overrides and validates the result before
/// any work starts.
pub fn load_scenario(path: &Path, overrides: &Overrides) -> Result<Scenario, CliError> {
    let mut s = Scenario::load(path)?;
    overrides.apply(&mut s);
    s.validate()?;
    Ok(s)
}

/// The scenario's own policy table when the names agree, otherwise the
/// policy's defaults.
pub fn resolve_policy(scenario: &Scenario, name: &str) -> Result<PolicySpec, CliError> {
    if scenario.policy.name() == name {
        return Ok(scenario.policy.clone());
    }
    Ok(PolicySpec::from_name(name)?)
}

/// Means of one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub policy: String,
    pub intervals: usize,
    pub accuracy: f64,
    pub bandwidth_bytes: f64,
    pub gpu_frames: f64,
    pub objective: f64,
    pub extra_inferences: usize,
}

impl Summary {
    pub fn of(trace: &Trace) -> Self {
        Summary {
            policy: trace.meta.policy.clone(),
            intervals: trace.records.len(),
            accuracy: trace.mean(|r| r.accuracy),
            bandwidth_bytes: trace.mean(|r| r.bandwidth_bytes),
            gpu_frames: trace.mean(|r| r.gpu_frames),
            objective: trace.mean(|r| r.objective),
            extra_inferences: trace.records.iter().map(|r| r.extra_inferences).sum(),
        }
    }
}

/// Runs one policy over a loaded scenario.
pub fn simulate(scenario: &Scenario, policy: &PolicySpec) -> Result<Trace, CliError> {
    let built = scenario.build()?;
    let pipe = built.pipeline(scenario.episode.match_radius);
    let cfg = scenario.episode_config(&built.space);
    Ok(run_episode(&pipe, &built.scene, &cfg, policy)?)
}

pub fn cmd_simulate(spec: &RunSpec, stdout: &mut dyn Write) -> Result<(), CliError> {
    let scenario = load_scenario(spec.single_scenario()?, &spec.overrides)?;
    let policy = match spec.policies.as_slice() {
        [] => scenario.policy.clone(),
        [one] => resolve_policy(&scenario, one)?,
        _ => return Err(CliError::Usage("simulate takes one --policy; use compare for several".into())),
    };
    let trace = simulate(&scenario, &policy)?;
    if let Some(out) = &spec.out {
        trace.write(out, spec.format)?;
    }
    let s = Summary::of(&trace);
    writeln!(stdout, "# {SUMMARY_SCHEMA}")?;
    writeln!(
        stdout,
        "policy,intervals,mean_accuracy,mean_bytes,mean_gpu,mean_objective,extra_inferences"
    )?;
    writeln!(
        stdout,
        "{},{},{:.6},{:.3},{:.4},{:.6},{}",
        s.policy, s.intervals, s.accuracy, s.bandwidth_bytes, s.gpu_frames, s.objective, s.extra_inferences
    )?;
    Ok(())
}

/// One sampled (interval, configuration) pair of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub scenario: String,
    pub t: usize,
    pub config: Configuration,
    pub estimated: Vec<f64>,
    pub numerical: Vec<f64>,
    pub cosine: f64,
    /// Both vectors were zero; the similarity is 1 by convention.
    pub both_zero: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradStats {
    pub samples: usize,
    pub both_zero: usize,
    pub min: f64,
    pub p10: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p90: f64,
    pub mean: f64,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl GradStats {
    pub fn of(samples: &[GradSample]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut v: Vec<f64> = samples.iter().map(|s| s.cosine).collect();
        v.sort_by(f64::total_cmp);
        Some(GradStats {
            samples: v.len(),
            both_zero: samples.iter().filter(|s| s.both_zero).count(),
            min: v[0],
            p10: percentile(&v, 10.0),
            p25: percentile(&v, 25.0),
            p50: percentile(&v, 50.0),
            p75: percentile(&v, 75.0),
            p90: percentile(&v, 90.0),
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

/// Per-knob similarity: the cosine between one knob's estimated and
/// numerical gradients across all samples.
pub fn per_knob_cosine(samples: &[GradSample]) -> Vec<f64> {
    let n = samples.first().map_or(0, |s| s.estimated.len());
    (0..n)
        .map(|k| {
            let a: Vec<f64> = samples.iter().map(|s| s.estimated[k]).collect();
            let b: Vec<f64> = samples.iter().map(|s| s.numerical[k]).collect();
            cosine(&a, &b)
        })
        .collect()
}

/// Compares the decoupled estimate with the re-inference oracle at one
/// random configuration per interval of the episode.
pub fn gradcheck(scenario: &Scenario) -> Result<Vec<GradSample>, CliError> {
    let built = scenario.build()?;
    let count = built.space.config_count();
    if count > DEFAULT_CAP {
        return Err(CliError::Usage(format!(
            "{}: {count} configurations exceed the cap of {DEFAULT_CAP}",
            scenario.name
        )));
    }
    let pipe = built.pipeline(scenario.episode.match_radius);
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.scene.seed);
    let draws: Vec<(usize, Configuration)> = (1..=scenario.episode.intervals)
        .map(|t| {
            let c = built.space.knobs().iter().map(|k| rng.random_range(0..k.len())).collect();
            (t, Configuration(c))
        })
        .collect();
    draws
        .into_par_iter()
        .map(|(t, config)| {
            let chunk = built.scene.chunk(t, &built.model);
            let (_, est) = pipe.analyze(&chunk, &config, &scenario.estimator).map_err(HarnessError::from)?;
            let num = pipe.numerical_acc_grad(&chunk, &config, Metric::F1).map_err(HarnessError::from)?;
            let zero = |v: &[f64]| v.iter().all(|&x| x == 0.0);
            Ok(GradSample {
                scenario: scenario.name.clone(),
                t,
                both_zero: zero(&est.acc_grad) && zero(&num.grad),
                cosine: cosine(&est.acc_grad, &num.grad),
                config,
                estimated: est.acc_grad,
                numerical: num.grad,
            })
        })
        .collect()
}

fn stats_row(label: &str, samples: &[GradSample], knob_names: &[String]) -> String {
    let s = GradStats::of(samples).expect("at least one interval per scenario");
    let knobs = if knob_names.is_empty() {
        String::new()
    } else {
        knob_names
            .iter()
            .zip(per_knob_cosine(samples))
            .map(|(n, c)| format!("{n}={c:.4}"))
            .collect::<Vec<_>>()
            .join(";")
    };
    format!(
        "{label},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{knobs}",
        s.samples, s.both_zero, s.min, s.p10, s.p25, s.p50, s.p75, s.p90, s.mean
    )
}

pub fn cmd_gradcheck(spec: &RunSpec, stdout: &mut dyn Write) -> Result<(), CliError> {
    if spec.scenarios.is_empty() {
        return Err(CliError::Usage("--scenario is required".into()));
    }
    let scenarios = spec
        .scenarios
        .iter()
        .map(|p| load_scenario(p, &spec.overrides))
        .collect::<Result<Vec<_>, _>>()?;
    let threshold = spec.threshold.unwrap_or(scenarios[0].gradcheck.threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Usage(format!("--threshold {threshold} must lie in [0, 1]")));
    }
    let mut all = Vec::new();
    let mut rows = Vec::new();
    for s in &scenarios {
        let samples = gradcheck(s)?;
        let names: Vec<String> = s.knobs.iter().map(|k| k.name.clone()).collect();
        rows.push(stats_row(&s.name, &samples, &names));
        all.extend(samples);
    }
    rows.push(stats_row("all", &all, &[]));
    writeln!(stdout, "# {GRADCHECK_SCHEMA}")?;
    writeln!(stdout, "scenario,samples,both_zero,min,p10,p25,p50,p75,p90,mean,per_knob")?;
    for r in rows {
        writeln!(stdout, "{r}")?;
    }
    if let Some(out) = &spec.out {
        let mut text = format!("# {GRADCHECK_SCHEMA}\nscenario,t,config,estimated,numerical,cosine,both_zero\n");
        for s in &all {
            let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
            let config = s.config.indices().iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";");
            writeln!(
                text,
                "{},{},{config},{},{},{},{}",
                s.scenario,
                s.t,
                join(&s.estimated),
                join(&s.numerical),
                s.cosine,
                s.both_zero
            )
            .expect("string write");
        }
        write_file(out, &text)?;
    }
    let mean = GradStats::of(&all).expect("non-empty").mean;
    if mean < threshold {
        return Err(CliError::Threshold(format!(
            "mean cosine similarity {mean:.4} is below the threshold {threshold}"
        )));
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| {
        CliError::Harness(HarnessError::Io {
            path: path.display().to_string(),
            source: e,
        })
    })
}

pub fn cmd_verify_theorem(spec: &RunSpec, stdout: &mut dyn Write) -> Result<(), CliError> {
    let reports: Vec<theorem::TheoremReport> = theorem::suite().iter().map(|i| i.verify()).collect();
    let mut text = format!("# {THEOREM_SCHEMA}\n");
    text.push_str("instance,shape,compliant,acc_grad,output_grad,decoupled,gap,tolerance,assumptions_hold,passed\n");
    for r in &reports {
        let shape = match r.shape {
            theorem::Shape::Linear => "linear",
            theorem::Shape::Sigmoid => "sigmoid",
        };
        writeln!(
            text,
            "{},{shape},{},{:e},{:e},{:e},{:e},{:e},{},{}",
            r.name,
            r.compliant,
            r.acc_grad,
            r.output_grad,
            r.decoupled,
            r.gap,
            r.tolerance(),
            r.assumptions_hold(),
            r.passed
        )
        .expect("string write");
    }
    stdout.write_all(text.as_bytes())?;
    if let Some(out) = &spec.out {
        write_file(out, &text)?;
    }
    let compliant = reports.iter().filter(|r| r.compliant).count();
    let violating = reports.len() - compliant;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Threshold(format!(
            "{} of {compliant} compliant and {violating} violating instances failed: {}",
            failed.len(),
            failed.join(", ")
        )))
    }
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub summary: Summary,
    /// Mean objective below the oracle's, when the oracle was run.
    pub oracle_gap: Option<f64>,
}

/// Runs several policies on one scenario with a shared seed and budget.
pub fn compare(scenario: &Scenario, policies: &[PolicySpec]) -> Result<Vec<(Trace, CompareRow)>, CliError> {
    let traces = policies
        .par_iter()
        .map(|p| simulate(scenario, p))
        .collect::<Result<Vec<_>, _>>()?;
    let oracle = traces.iter().find(|t| t.meta.policy == "oracle").map(|t| t.mean(|r| r.objective));
    Ok(traces
        .into_iter()
        .map(|t| {
            let summary = Summary::of(&t);
            let oracle_gap = oracle.map(|o| o - summary.objective);
            (t, CompareRow { summary, oracle_gap })
        })
        .collect())
}

pub fn cmd_compare(spec: &RunSpec, stdout: &mut dyn Write) -> Result<(), CliError> {
    let scenario = load_scenario(spec.single_scenario()?, &spec.overrides)?;
    let names: Vec<String> = if spec.policies.is_empty() {
        PolicySpec::NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        spec.policies.clone()
    };
    let mut policies = Vec::with_capacity(names.len());
    for n in &names {
        if policies.iter().any(|p: &PolicySpec| p.name() == n) {
            return Err(CliError::Usage(format!("policy `{n}` listed twice")));
        }
        let p = resolve_policy(&scenario, n)?;
        p.validate(&scenario.space()?)?;
        policies.push(p);
    }
    let results = compare(&scenario, &policies)?;
    if let Some(dir) = &spec.out {
        std::fs::create_dir_all(dir).map_err(|e| {
            CliError::Harness(HarnessError::Io {
                path: dir.display().to_string(),
                source: e,
            })
        })?;
        let ext = match spec.format {
            TraceFormat::Csv => "csv",
            TraceFormat::Jsonl => "jsonl",
        };
        for (trace, _) in &results {
            trace.write(&dir.join(format!("{}.{ext}", trace.meta.policy)), spec.format)?;
        }
    }
    writeln!(stdout, "# {COMPARE_SCHEMA}")?;
    writeln!(
        stdout,
        "policy,mean_accuracy,mean_bytes,mean_gpu,mean_objective,total_extra_inferences,oracle_gap"
    )?;
    for (_, row) in &results {
        let s = &row.summary;
        let gap = row.oracle_gap.map_or(String::new(), |g| format!("{g:.6}"));
        writeln!(
            stdout,
            "{},{:.6},{:.3},{:.4},{:.6},{},{gap}",
            s.policy, s.accuracy, s.bandwidth_bytes, s.gpu_frames, s.objective, s.extra_inferences
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 10.0), 1.0);
        assert_eq!(percentile(&v, 50.0), 5.0);
        assert_eq!(percentile(&v, 90.0), 9.0);
        assert_eq!(percentile(&v, 100.0), 10.0);
        assert_eq!(percentile(&[3.0], 25.0), 3.0);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Harness(HarnessError::Invalid("x".into())).exit_code(), 1);
        assert_eq!(CliError::Threshold("x".into()).exit_code(), 2);
    }

    #[test]
    fn one_knob_cosine_is_zero_or_one() {
        for (a, b) in [(0.3, 0.9), (0.0, 0.5), (0.0, 0.0), (1.0, 0.0)] {
            let c = cosine(&[a], &[b]);
            assert!(c == 0.0 || (c - 1.0).abs() < 1e-12, "{a} {b} -> {c}");
        }
    }

    #[test]
    fn overrides_reach_every_section() {
        let text = "[[knobs]]\nname = \"fps\"\neffect = \"frame-rate\"\nvalues = [1, 10]\n";
        let mut s = Scenario::parse(text, "inline").unwrap();
        Overrides {
            alpha: Some(0.2),
            lambda: Some(0.0),
            seed: Some(99),
            intervals: Some(5),
            mcu_block: Some(8),
            no_reuse: true,
        }
        .apply(&mut s);
        assert_eq!(s.controller.alpha, 0.2);
        assert_eq!(s.controller.lambda, 0.0);
        assert_eq!(s.scene.seed, 99);
        assert_eq!(s.episode.intervals, 5);
        assert_eq!(s.estimator.mcu_block, 8);
        assert!(!s.estimator.reuse_dnngrad);
    }
}
