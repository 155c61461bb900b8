//! Gradient ascent over the discrete configuration space.
//!
//! Every knob carries a continuous shadow position in `[0, 1]`. Each
//! interval the shadow moves along the estimated objective gradient and the
//! configuration that runs next is the knob value nearest to it.

pub mod surface;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{EstimatorError, GradientEstimate, InferenceCache, Metric, Pipeline};
use crate::knobs::{Configuration, KnobError, KnobSpace, KnobSpec, RawChunk, ResourceUsage};

/// Largest configuration space the exhaustive oracle will enumerate.
pub const DEFAULT_CAP: usize = 10_000;

const TIE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("configuration space has {count} points, above the cap of {cap}")]
    Cap { count: usize, cap: usize },
    #[error(transparent)]
    Knob(#[from] KnobError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

pub type Result<T> = std::result::Result<T, ControllerError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerParams {
    pub alpha: f64,
    pub lambda: f64,
}

impl Default for ControllerParams {
    fn default() -> Self {
        ControllerParams { alpha: 0.5, lambda: 1.0 }
    }
}

/// Price of one byte and of one frame inference in objective units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceWeights {
    pub bandwidth: f64,
    pub gpu: f64,
}

impl ResourceWeights {
    /// Weights under which the most expensive configuration costs
    /// `bandwidth_share` in bandwidth and `gpu_share` in computation.
    pub fn relative(space: &KnobSpace, bandwidth_share: f64, gpu_share: f64) -> Self {
        let max = space.max_config();
        let frames = space.native_frames() as f64;
        let bytes = space.frame_bytes(&max) * frames;
        ResourceWeights {
            bandwidth: if bytes > 0.0 { bandwidth_share / bytes } else { 0.0 },
            gpu: if frames > 0.0 { gpu_share / frames } else { 0.0 },
        }
    }

    pub fn cost(&self, usage: &ResourceUsage) -> f64 {
        self.bandwidth * usage.bandwidth_bytes + self.gpu * usage.gpu_frames
    }
}

/// Per-interval objective: accuracy minus the weighted resource bill.
pub fn objective(accuracy: f64, usage: &ResourceUsage, lambda: f64, weights: &ResourceWeights) -> f64 {
    accuracy - lambda * weights.cost(usage)
}

/// Normalized position of a value index: 0 for the first, 1 for the last.
pub fn normalize(spec: &KnobSpec, index: usize) -> f64 {
    if spec.len() <= 1 {
        0.0
    } else {
        index.min(spec.max_index()) as f64 * spec.step()
    }
}

/// Index whose normalized position is nearest to `x`; exact ties go to the
/// lower (cheaper) index.
pub fn snap(spec: &KnobSpec, x: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for i in 0..spec.len() {
        let d = (x - normalize(spec, i)).abs();
        if d < best_d - TIE {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Objective gradient per knob in normalized units:
/// `acc_grad - lambda * (w_bw * res_bw + w_gpu * res_gpu)`.
pub fn ascent_direction(estimate: &GradientEstimate, lambda: f64, weights: &ResourceWeights) -> Vec<f64> {
    estimate
        .acc_grad
        .iter()
        .zip(estimate.res_grad_bw.iter().zip(&estimate.res_grad_gpu))
        .map(|(a, (bw, gpu))| a - lambda * (weights.bandwidth * bw + weights.gpu * gpu))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    config: Configuration,
    shadow: Vec<f64>,
    pub params: ControllerParams,
}

impl ControllerState {
    pub fn new(knobs: &[KnobSpec], start: Configuration, params: ControllerParams) -> Self {
        let shadow = knobs.iter().zip(start.indices()).map(|(k, &i)| normalize(k, i)).collect();
        ControllerState {
            config: start,
            shadow,
            params,
        }
    }

    pub fn config(&self) -> &Configuration {
        &self.config
    }

    pub fn shadow(&self) -> &[f64] {
        &self.shadow
    }

    /// Moves the shadow along the estimated gradient, clamps it to `[0, 1]`
    /// and snaps it to the configuration used for the next interval.
    pub fn step(&mut self, knobs: &[KnobSpec], estimate: &GradientEstimate, weights: &ResourceWeights) -> &Configuration {
        let direction = ascent_direction(estimate, self.params.lambda, weights);
        for (s, d) in self.shadow.iter_mut().zip(&direction) {
            *s = (*s + self.params.alpha * d).clamp(0.0, 1.0);
        }
        self.config = Configuration(knobs.iter().zip(&self.shadow).map(|(k, &x)| snap(k, x)).collect());
        &self.config
    }
}

/// One evaluated configuration of an interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluated {
    pub config: Configuration,
    pub accuracy: f64,
    pub usage: ResourceUsage,
    pub objective: f64,
}

/// Picks the best of `candidates`; ties go to the lower resource bill and
/// then to the lexicographically smaller configuration.
pub fn best_of<'a>(candidates: &'a [Evaluated], weights: &ResourceWeights) -> Option<&'a Evaluated> {
    candidates.iter().reduce(|best, c| {
        let better = c.objective > best.objective + TIE
            || ((c.objective - best.objective).abs() <= TIE
                && (weights.cost(&c.usage) < weights.cost(&best.usage) - TIE
                    || ((weights.cost(&c.usage) - weights.cost(&best.usage)).abs() <= TIE && c.config < best.config)));
        if better {
            c
        } else {
            best
        }
    })
}

/// Scores the given configurations of one chunk against its reference.
pub fn evaluate_configs(
    pipe: &Pipeline,
    chunk: &RawChunk,
    configs: &[Configuration],
    lambda: f64,
    weights: &ResourceWeights,
    cache: &mut InferenceCache,
) -> Result<Vec<Evaluated>> {
    let reference = cache.results(pipe.model, &pipe.space.apply_config(chunk, &pipe.space.max_config())?)?;
    let mut out = Vec::with_capacity(configs.len());
    for config in configs {
        let filtered = pipe.space.apply_config(chunk, config)?;
        let results = cache.results(pipe.model, &filtered)?;
        let accuracy = pipe.accuracy(&results, &reference, Metric::F1);
        out.push(Evaluated {
            config: config.clone(),
            accuracy,
            usage: filtered.usage,
            objective: objective(accuracy, &filtered.usage, lambda, weights),
        });
    }
    Ok(out)
}

/// Exhaustive per-interval optimum of the objective.
pub fn brute_force_optimal(
    pipe: &Pipeline,
    chunk: &RawChunk,
    lambda: f64,
    weights: &ResourceWeights,
    cap: usize,
) -> Result<Evaluated> {
    let count = pipe.space.config_count();
    if count > cap {
        return Err(ControllerError::Cap { count, cap });
    }
    let mut cache = InferenceCache::new();
    let all = evaluate_configs(pipe, chunk, &pipe.space.all_configs(), lambda, weights, &mut cache)?;
    Ok(best_of(&all, weights).expect("non-empty space").clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::NdArray;
    use crate::detector::{DetectorModel, DetectorSpec};
    use crate::knobs::Effect;

    fn three() -> KnobSpec {
        KnobSpec::new("res", Effect::Resolution, &[0.25, 0.5, 1.0])
    }

    #[test]
    fn normalize_three_values() {
        let k = three();
        let xs: Vec<f64> = (0..3).map(|i| normalize(&k, i)).collect();
        assert_eq!(xs, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn snap_nearest_and_ties() {
        let k = three();
        assert_eq!(snap(&k, 0.74), 1);
        assert_eq!(snap(&k, 0.75), 1);
        assert_eq!(snap(&k, 0.76), 2);
        assert_eq!(snap(&k, 0.25), 0);
        let four = KnobSpec::new("fps", Effect::FrameRate, &[1.0, 2.0, 5.0, 10.0]);
        // 0.5 sits halfway between 1/3 and 2/3
        assert_eq!(snap(&four, 0.5), 1);
    }

    fn estimate(acc: Vec<f64>, bw: Vec<f64>, gpu: Vec<f64>) -> GradientEstimate {
        GradientEstimate {
            acc_grad: acc,
            res_grad_bw: bw,
            res_grad_gpu: gpu,
            ..GradientEstimate::default()
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let knobs = vec![three(), three()];
        let mut s = ControllerState::new(&knobs, Configuration(vec![1, 2]), ControllerParams::default());
        let w = ResourceWeights { bandwidth: 1.0, gpu: 1.0 };
        let next = s.step(&knobs, &estimate(vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]), &w).clone();
        assert_eq!(next, Configuration(vec![1, 2]));
    }

    #[test]
    fn huge_accuracy_gradient_saturates() {
        let knobs = vec![three()];
        let mut s = ControllerState::new(&knobs, Configuration(vec![0]), ControllerParams::default());
        let w = ResourceWeights { bandwidth: 1.0, gpu: 1.0 };
        s.step(&knobs, &estimate(vec![100.0], vec![1e-6], vec![0.0]), &w);
        assert_eq!(s.config(), &Configuration(vec![2]));
        assert_eq!(s.shadow(), &[1.0]);
    }

    #[test]
    fn shadow_accumulates_sub_step_moves() {
        let knobs = vec![three()];
        let mut s = ControllerState::new(&knobs, Configuration(vec![0]), ControllerParams::default());
        let w = ResourceWeights { bandwidth: 0.0, gpu: 0.0 };
        let e = estimate(vec![0.3], vec![0.0], vec![0.0]);
        s.step(&knobs, &e, &w);
        assert_eq!(s.config(), &Configuration(vec![0]));
        s.step(&knobs, &e, &w);
        assert_eq!(s.config(), &Configuration(vec![1]));
    }

    fn setup() -> (DetectorModel, KnobSpace, RawChunk) {
        let model = DetectorModel::new(32, 32, &DetectorSpec::default());
        let space = KnobSpace::new(
            vec![
                KnobSpec::new("fps", Effect::FrameRate, &[1.0, 2.0, 5.0, 10.0]),
                KnobSpec::new("res", Effect::Resolution, &[0.25, 1.0]),
            ],
            32,
            32,
            10,
        )
        .unwrap();
        let frames = (0..10)
            .map(|_| {
                let mut f = NdArray::zeros(&[32, 32]);
                model.plant(&mut f, 0, 12, 12, 1.0);
                f
            })
            .collect();
        let chunk = RawChunk {
            t: 1,
            frames,
            objects: Vec::new(),
        };
        (model, space, chunk)
    }

    #[test]
    fn brute_force_limits() {
        let (model, space, chunk) = setup();
        let pipe = Pipeline {
            model: &model,
            space: &space,
            match_radius: 1,
        };
        let w = ResourceWeights::relative(&space, 0.25, 0.25);
        // a still object: one frame at full resolution already matches k*
        let best = brute_force_optimal(&pipe, &chunk, 1.0, &w, DEFAULT_CAP).unwrap();
        assert_eq!(best.config, Configuration(vec![0, 1]));
        assert_eq!(best.accuracy, 1.0);
        let free = brute_force_optimal(&pipe, &chunk, 0.0, &w, DEFAULT_CAP).unwrap();
        assert_eq!(free.accuracy, 1.0);
        let pricey = brute_force_optimal(&pipe, &chunk, 1e6, &w, DEFAULT_CAP).unwrap();
        assert_eq!(pricey.config, space.min_config());
        assert!(matches!(
            brute_force_optimal(&pipe, &chunk, 1.0, &w, 3),
            Err(ControllerError::Cap { count: 8, cap: 3 })
        ));
    }

    #[test]
    fn relative_weights_price_k_star() {
        let (_, space, chunk) = setup();
        let w = ResourceWeights::relative(&space, 0.25, 0.5);
        let top = space.resource_usage(&chunk, &space.max_config()).unwrap();
        assert!((w.cost(&top) - 0.75).abs() < 1e-12);
    }
}
