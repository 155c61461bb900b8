//! The interval loop: filter, infer, score against the reference, let the
//! policy pick the next configuration, record everything.

use serde::{Deserialize, Serialize};

use super::trace::{IntervalRecord, Trace, TraceMeta, TRACE_SCHEMA};
#[cfg(test)]
use super::trace::TraceFormat;
use super::{HarnessError, Scene};
use crate::controller::{
    best_of, evaluate_configs, objective, ControllerParams, ControllerState, Evaluated, ResourceWeights,
    DEFAULT_CAP,
};
use crate::estimator::{infer_interval, EstimatorPolicy, InferenceCache, Metric, Pipeline, BACKPROP_COST};
use crate::knobs::{Configuration, Effect, KnobSpace, RawChunk, ResourceUsage};

/// Which configurations a profiling round re-runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileSubset {
    /// Every configuration.
    Full,
    /// The lowest, middle and highest value of every knob.
    Coarse,
    /// The best `top_k` configurations of the previous round; the first
    /// round uses the coarse grid.
    TopK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolicySpec {
    #[serde(rename = "oneadapt")]
    OneAdapt,
    Profiling {
        #[serde(default = "default_period")]
        period: usize,
        #[serde(default = "default_subset")]
        subset: ProfileSubset,
        #[serde(default = "default_top_k")]
        top_k: usize,
    },
    FrameDiffHeuristic {
        threshold: f64,
    },
    Static {
        /// Value indices; the most expensive configuration when absent.
        #[serde(default)]
        config: Option<Vec<usize>>,
    },
    Oracle,
}

fn default_period() -> usize {
    8
}

fn default_subset() -> ProfileSubset {
    ProfileSubset::Coarse
}

fn default_top_k() -> usize {
    3
}

impl PolicySpec {
    pub const NAMES: [&'static str; 5] = ["oneadapt", "profiling", "frame-diff-heuristic", "static", "oracle"];

    pub fn name(&self) -> &'static str {
        match self {
            PolicySpec::OneAdapt => "oneadapt",
            PolicySpec::Profiling { .. } => "profiling",
            PolicySpec::FrameDiffHeuristic { .. } => "frame-diff-heuristic",
            PolicySpec::Static { .. } => "static",
            PolicySpec::Oracle => "oracle",
        }
    }

    /// Default parameters for a policy name.
    pub fn from_name(name: &str) -> Result<Self, HarnessError> {
        Ok(match name {
            "oneadapt" => PolicySpec::OneAdapt,
            "profiling" => PolicySpec::Profiling {
                period: default_period(),
                subset: default_subset(),
                top_k: default_top_k(),
            },
            "frame-diff-heuristic" => PolicySpec::FrameDiffHeuristic { threshold: 0.015 },
            "static" => PolicySpec::Static { config: None },
            "oracle" => PolicySpec::Oracle,
            other => {
                return Err(HarnessError::Invalid(format!(
                    "unknown policy `{other}`; valid policies: {}",
                    PolicySpec::NAMES.join(", ")
                )))
            }
        })
    }

    pub fn validate(&self, space: &KnobSpace) -> Result<(), HarnessError> {
        match self {
            PolicySpec::Profiling { period, top_k, .. } => {
                if *period == 0 {
                    return Err(HarnessError::Invalid("profiling period must be at least 1".into()));
                }
                if *top_k == 0 {
                    return Err(HarnessError::Invalid("profiling top_k must be at least 1".into()));
                }
            }
            PolicySpec::FrameDiffHeuristic { threshold } => {
                let knob = space
                    .knobs()
                    .iter()
                    .find(|k| k.effect == Effect::FrameDiff)
                    .ok_or_else(|| HarnessError::Invalid("frame-diff-heuristic needs a frame-diff knob".into()))?;
                let (lo, hi) = knob
                    .values
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
                if !(lo..=hi).contains(threshold) {
                    return Err(HarnessError::Invalid(format!(
                        "threshold {threshold} lies outside the frame-diff knob's range [{lo}, {hi}]"
                    )));
                }
            }
            PolicySpec::Static { config: Some(c) } => {
                space.validate(&Configuration(c.clone()))?;
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub intervals: usize,
    pub params: ControllerParams,
    pub estimator: EstimatorPolicy,
    pub weights: ResourceWeights,
    /// Frame inferences a policy may spend per interval; `None` is unlimited.
    pub gpu_budget: Option<f64>,
    /// Configuration of the first interval; the most expensive one when absent.
    pub start: Option<Configuration>,
}

struct Step {
    config: Configuration,
    accuracy: f64,
    usage: ResourceUsage,
    acc_grad: Vec<f64>,
    extra: usize,
    backprops: usize,
}

enum PolicyState {
    OneAdapt(ControllerState),
    Profiling(Profiler),
    Fixed(Configuration),
    Oracle,
}

struct Profiler {
    period: usize,
    subset: ProfileSubset,
    top_k: usize,
    current: Configuration,
    ranking: Vec<Configuration>,
    /// Frame inferences still owed by the round in progress, and its choice.
    debt: usize,
    pending: Option<Configuration>,
}

impl Profiler {
    fn candidates(&self, space: &KnobSpace) -> Vec<Configuration> {
        match self.subset {
            ProfileSubset::Full => space.all_configs(),
            ProfileSubset::TopK if !self.ranking.is_empty() => self.ranking.iter().take(self.top_k).cloned().collect(),
            _ => coarse_grid(space),
        }
    }
}

/// Lowest, middle and highest index of every knob, combined.
pub fn coarse_grid(space: &KnobSpace) -> Vec<Configuration> {
    let mut out = vec![Vec::new()];
    for k in space.knobs() {
        let mut picks = vec![0, k.max_index() / 2, k.max_index()];
        picks.dedup();
        out = out
            .into_iter()
            .flat_map(|prefix| {
                picks.iter().map(move |&i| {
                    let mut c = prefix.clone();
                    c.push(i);
                    c
                })
            })
            .collect();
    }
    out.into_iter().map(Configuration).collect()
}

/// Ranks evaluated configurations best first.
fn rank(mut all: Vec<Evaluated>, weights: &ResourceWeights) -> Vec<Configuration> {
    let mut out = Vec::with_capacity(all.len());
    while !all.is_empty() {
        let best = best_of(&all, weights).expect("non-empty").config.clone();
        all.retain(|e| e.config != best);
        out.push(best);
    }
    out
}

fn heuristic_config(space: &KnobSpace, threshold: f64) -> Configuration {
    let mut c = space.max_config();
    for (i, k) in space.knobs().iter().enumerate() {
        if k.effect == Effect::FrameDiff {
            // thresholds are listed from high (cheap) to low; pick the nearest
            let nearest = (0..k.len())
                .min_by(|&a, &b| {
                    (k.values[a] - threshold)
                        .abs()
                        .total_cmp(&(k.values[b] - threshold).abs())
                        .then(a.cmp(&b))
                })
                .expect("non-empty knob");
            c.0[i] = nearest;
        }
    }
    c
}

fn scored(
    pipe: &Pipeline,
    chunk: &RawChunk,
    config: &Configuration,
    reference: &[crate::detector::InferenceResult],
    cache: &mut InferenceCache,
) -> Result<(f64, ResourceUsage), HarnessError> {
    let filtered = pipe.space.apply_config(chunk, config)?;
    let results = cache.results(pipe.model, &filtered)?;
    Ok((pipe.accuracy(&results, reference, Metric::F1), filtered.usage))
}

/// Runs one policy over the first `cfg.intervals` intervals of a scene.
pub fn run_episode(
    pipe: &Pipeline,
    scene: &Scene,
    cfg: &EpisodeConfig,
    policy: &PolicySpec,
) -> Result<Trace, HarnessError> {
    let space = pipe.space;
    policy.validate(space)?;
    let start = cfg.start.clone().unwrap_or_else(|| space.max_config());
    space.validate(&start)?;
    let lambda = cfg.params.lambda;
    let mut state = match policy {
        PolicySpec::OneAdapt => PolicyState::OneAdapt(ControllerState::new(space.knobs(), start, cfg.params)),
        PolicySpec::Profiling { period, subset, top_k } => PolicyState::Profiling(Profiler {
            period: *period,
            subset: *subset,
            top_k: *top_k,
            current: start,
            ranking: Vec::new(),
            debt: 0,
            pending: None,
        }),
        PolicySpec::FrameDiffHeuristic { threshold } => PolicyState::Fixed(heuristic_config(space, *threshold)),
        PolicySpec::Static { config } => {
            PolicyState::Fixed(config.clone().map(Configuration).unwrap_or_else(|| space.max_config()))
        }
        PolicySpec::Oracle => {
            if space.config_count() > DEFAULT_CAP {
                return Err(HarnessError::Invalid(format!(
                    "oracle needs at most {DEFAULT_CAP} configurations, space has {}",
                    space.config_count()
                )));
            }
            PolicyState::Oracle
        }
    };

    let mut records = Vec::with_capacity(cfg.intervals);
    for t in 1..=cfg.intervals {
        let chunk = scene.chunk(t, pipe.model);
        let mut cache = InferenceCache::new();
        // reference inference is an evaluation cost, charged to no policy
        let reference = cache.results(pipe.model, &space.apply_config(&chunk, &space.max_config())?)?;
        let step = match &mut state {
            PolicyState::OneAdapt(ctl) => {
                let config = ctl.config().clone();
                let mut inference = infer_interval(pipe.model, space, &chunk, &config)?;
                let accuracy = pipe.accuracy(&inference.results, &reference, Metric::F1);
                let estimate = pipe.estimate(&chunk, &config, &mut inference, &cfg.estimator)?;
                let usage = inference.filtered.usage;
                ctl.step(space.knobs(), &estimate, &cfg.weights);
                Step {
                    config,
                    accuracy,
                    usage,
                    acc_grad: estimate.acc_grad,
                    extra: estimate.extra_inferences_used,
                    backprops: estimate.backprops_used,
                }
            }
            PolicyState::Profiling(p) => {
                let config = p.current.clone();
                let (accuracy, usage) = scored(pipe, &chunk, &config, &reference, &mut cache)?;
                if (t - 1) % p.period == 0 && p.debt == 0 && p.pending.is_none() {
                    // re-run this interval's data under every candidate plus
                    // the reference the candidates are scored against
                    let candidates = p.candidates(space);
                    let all = evaluate_configs(pipe, &chunk, &candidates, lambda, &cfg.weights, &mut cache)?;
                    let work: f64 = space.native_frames() as f64 + all.iter().map(|e| e.usage.gpu_frames).sum::<f64>();
                    p.debt = work.round() as usize;
                    let ranking = rank(all, &cfg.weights);
                    p.pending = ranking.first().cloned();
                    p.ranking = ranking;
                }
                let spare = match cfg.gpu_budget {
                    Some(b) => (b - usage.gpu_frames).max(0.0).floor() as usize,
                    None => usize::MAX,
                };
                let paid = p.debt.min(spare);
                p.debt -= paid;
                if p.debt == 0 {
                    if let Some(next) = p.pending.take() {
                        p.current = next;
                    }
                }
                Step {
                    config,
                    accuracy,
                    usage,
                    acc_grad: Vec::new(),
                    extra: paid,
                    backprops: 0,
                }
            }
            PolicyState::Fixed(config) => {
                let config = config.clone();
                let (accuracy, usage) = scored(pipe, &chunk, &config, &reference, &mut cache)?;
                Step {
                    config,
                    accuracy,
                    usage,
                    acc_grad: Vec::new(),
                    extra: 0,
                    backprops: 0,
                }
            }
            PolicyState::Oracle => {
                let all = evaluate_configs(pipe, &chunk, &space.all_configs(), lambda, &cfg.weights, &mut cache)?;
                let best = best_of(&all, &cfg.weights).expect("non-empty space").clone();
                Step {
                    config: best.config,
                    accuracy: best.accuracy,
                    usage: best.usage,
                    acc_grad: Vec::new(),
                    extra: 0,
                    backprops: 0,
                }
            }
        };
        let gpu_frames = step.usage.gpu_frames + BACKPROP_COST * step.backprops as f64 + step.extra as f64;
        let usage = ResourceUsage {
            bandwidth_bytes: step.usage.bandwidth_bytes,
            gpu_frames,
        };
        records.push(IntervalRecord {
            t,
            phase: scene.phase_at(t).0,
            config: step.config.0,
            accuracy: step.accuracy,
            bandwidth_bytes: usage.bandwidth_bytes,
            gpu_frames,
            objective: objective(step.accuracy, &usage, lambda, &cfg.weights),
            acc_grad: step.acc_grad,
            extra_inferences: step.extra,
            backprops: step.backprops,
        });
    }
    let trace = Trace {
        meta: TraceMeta {
            schema: TRACE_SCHEMA.into(),
            policy: policy.name().into(),
            seed: scene.spec().seed,
            lambda,
            alpha: cfg.params.alpha,
            weights: cfg.weights,
            knobs: space.knobs().iter().map(|k| k.name.clone()).collect(),
            values: space.knobs().iter().map(|k| k.values.clone()).collect(),
        },
        records,
    };
    trace.check()?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{DetectorModel, DetectorSpec};
    use crate::harness::{BackgroundMotion, Phase, SceneSpec};
    use crate::knobs::KnobSpec;

    fn model() -> DetectorModel {
        DetectorModel::new(32, 32, &DetectorSpec::default())
    }

    fn space() -> KnobSpace {
        KnobSpace::new(
            vec![
                KnobSpec::new("fps", Effect::FrameRate, &[1.0, 2.0, 5.0, 10.0]),
                KnobSpec::new("res", Effect::Resolution, &[0.5, 1.0]),
                KnobSpec::new("diff", Effect::FrameDiff, &[0.03, 0.015, 0.008, 0.0]),
            ],
            32,
            32,
            10,
        )
        .unwrap()
    }

    fn scene(m: &DetectorModel, objects: usize, speed: f64, moving_background: bool) -> Scene {
        let spec = SceneSpec {
            phases: vec![Phase {
                objects,
                speed,
                ..Phase::default()
            }],
            background: if moving_background { 0.15 } else { 0.0 },
            background_motion: moving_background.then(BackgroundMotion::default),
            ..SceneSpec::default()
        };
        Scene::new(spec, m).unwrap()
    }

    fn config(space: &KnobSpace, intervals: usize) -> EpisodeConfig {
        EpisodeConfig {
            intervals,
            params: ControllerParams::default(),
            estimator: EstimatorPolicy::default(),
            weights: ResourceWeights::relative(space, 0.05, 0.05),
            gpu_budget: Some(15.0),
            start: None,
        }
    }

    #[test]
    fn oneadapt_spends_one_backward_and_no_inference() {
        let (m, s) = (model(), space());
        let pipe = Pipeline { model: &m, space: &s, match_radius: 1 };
        let sc = scene(&m, 4, 0.3, false);
        let trace = run_episode(&pipe, &sc, &config(&s, 8), &PolicySpec::OneAdapt).unwrap();
        assert_eq!(trace.records.len(), 8);
        for r in &trace.records {
            assert_eq!(r.extra_inferences, 0);
            assert_eq!(r.backprops, 1);
            let kept = s.resource_usage(&sc.chunk(r.t, &m), &Configuration(r.config.clone())).unwrap().gpu_frames;
            assert!((r.gpu_frames - kept - BACKPROP_COST).abs() < 1e-12);
            assert_eq!(r.acc_grad.len(), 3);
        }
    }

    #[test]
    fn static_at_max_is_exact_and_costs_everything() {
        let (m, s) = (model(), space());
        let pipe = Pipeline { model: &m, space: &s, match_radius: 1 };
        let sc = scene(&m, 4, 1.0, false);
        let trace = run_episode(&pipe, &sc, &config(&s, 5), &PolicySpec::Static { config: None }).unwrap();
        for r in &trace.records {
            assert_eq!(r.accuracy, 1.0);
            assert_eq!(r.gpu_frames, 10.0);
            assert_eq!(r.bandwidth_bytes, 10.0 * 1024.0);
        }
    }

    #[test]
    fn oracle_is_an_upper_envelope() {
        let (m, s) = (model(), space());
        let pipe = Pipeline { model: &m, space: &s, match_radius: 1 };
        let sc = scene(&m, 4, 0.6, false);
        let cfg = config(&s, 6);
        let oracle = run_episode(&pipe, &sc, &cfg, &PolicySpec::Oracle).unwrap();
        for name in ["oneadapt", "profiling", "frame-diff-heuristic", "static"] {
            let other = run_episode(&pipe, &sc, &cfg, &PolicySpec::from_name(name).unwrap()).unwrap();
            for (o, r) in oracle.records.iter().zip(&other.records) {
                // the oracle is not charged the backward pass
                let uncharged = r.objective + lambda_cost(&cfg, BACKPROP_COST * r.backprops as f64 + r.extra_inferences as f64);
                assert!(o.objective >= uncharged - 1e-12, "{name} t={}", r.t);
            }
        }
    }

    fn lambda_cost(cfg: &EpisodeConfig, frames: f64) -> f64 {
        cfg.params.lambda * cfg.weights.gpu * frames
    }

    #[test]
    fn heuristic_is_fooled_by_background_motion() {
        let (m, s) = (model(), space());
        let pipe = Pipeline { model: &m, space: &s, match_radius: 1 };
        let policy = PolicySpec::FrameDiffHeuristic { threshold: 0.015 };
        let cfg = config(&s, 6);
        let still = run_episode(&pipe, &scene(&m, 0, 0.0, false), &cfg, &policy).unwrap();
        let drifting = run_episode(&pipe, &scene(&m, 0, 0.0, true), &cfg, &policy).unwrap();
        assert!(still.mean(|r| r.gpu_frames) <= 2.0);
        assert!(drifting.mean(|r| r.gpu_frames) >= 8.0);
        // nothing to detect either way
        assert!(drifting.records.iter().all(|r| r.accuracy == 1.0));
    }

    #[test]
    fn heuristic_at_zero_threshold_keeps_every_frame() {
        let (m, s) = (model(), space());
        let pipe = Pipeline { model: &m, space: &s, match_radius: 1 };
        let trace = run_episode(
            &pipe,
            &scene(&m, 2, 0.0, false),
            &config(&s, 3),
            &PolicySpec::FrameDiffHeuristic { threshold: 0.0 },
        )
        .unwrap();
        assert!(trace.records.iter().all(|r| r.config == vec![3, 1, 3] && r.gpu_frames == 10.0));
    }

    #[test]
    fn unlimited_full_profiling_every_interval_tracks_oracle_on_a_still_scene() {
        let (m, s) = (model(), space());
        let pipe = Pipeline { model: &m, space: &s, match_radius: 1 };
        let sc = scene(&m, 4, 0.0, false);
        let mut cfg = config(&s, 5);
        cfg.gpu_budget = None;
        let policy = PolicySpec::Profiling {
            period: 1,
            subset: ProfileSubset::Full,
            top_k: 3,
        };
        let prof = run_episode(&pipe, &sc, &cfg, &policy).unwrap();
        let oracle = run_episode(&pipe, &sc, &cfg, &PolicySpec::Oracle).unwrap();
        let work: usize = 10 + s.all_configs().iter().map(|c| s.resource_usage(&sc.chunk(1, &m), c).unwrap().gpu_frames as usize).sum::<usize>();
        assert_eq!(prof.records[0].extra_inferences, work);
        for (p, o) in prof.records.iter().zip(&oracle.records).skip(1) {
            assert_eq!(p.config, o.config, "t={}", p.t);
        }
    }

    #[test]
    fn profiling_pays_rounds_from_spare_budget() {
        let (m, s) = (model(), space());
        let pipe = Pipeline { model: &m, space: &s, match_radius: 1 };
        let sc = scene(&m, 4, 0.3, false);
        let trace = run_episode(&pipe, &sc, &config(&s, 16), &PolicySpec::from_name("profiling").unwrap()).unwrap();
        for r in &trace.records {
            assert!(r.gpu_frames <= 15.0 + 1e-9, "t={} spent {}", r.t, r.gpu_frames);
        }
        // the first round is paid off over several intervals before it switches
        let switch = trace.records.iter().position(|r| r.config != trace.records[0].config).unwrap();
        assert!(switch > 1);
        assert!(trace.records[..switch].iter().all(|r| r.extra_inferences > 0));
    }

    #[test]
    fn episodes_are_reproducible() {
        let (m, s) = (model(), space());
        let pipe = Pipeline { model: &m, space: &s, match_radius: 1 };
        let sc = scene(&m, 3, 0.6, true);
        let a = run_episode(&pipe, &sc, &config(&s, 6), &PolicySpec::OneAdapt).unwrap();
        let b = run_episode(&pipe, &sc, &config(&s, 6), &PolicySpec::OneAdapt).unwrap();
        assert_eq!(a.render(TraceFormat::Csv).unwrap(), b.render(TraceFormat::Csv).unwrap());
    }

    #[test]
    fn coarse_grid_takes_ends_and_middle() {
        let g = coarse_grid(&space());
        // fps {0, 1, 3}, res {0, 1}, diff {0, 1, 3}
        assert_eq!(g.len(), 18);
        assert!(g.contains(&Configuration(vec![1, 0, 3])));
        assert!(!g.contains(&Configuration(vec![2, 0, 0])));
    }

    #[test]
    fn unknown_policy_lists_the_valid_ones() {
        let err = PolicySpec::from_name("greedy").unwrap_err().to_string();
        for n in PolicySpec::NAMES {
            assert!(err.contains(n));
        }
    }
}
