//! Per-knob accuracy gradients without extra inference.
//!
//! The accuracy change caused by one knob step is estimated as the product
//! of two cheap factors: the gradient of the output utility with respect to
//! the model input (one backward pass over a frame that was inferred anyway)
//! and the change of the model input itself (re-filtering only). The input
//! gradient is compressed by averaging its magnitude over square blocks
//! before the product is taken.

pub mod theorem;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NdArray};
use crate::detector::{self, DetectorModel, FrameTrace, InferenceResult};
use crate::knobs::{Configuration, Effect, Filtered, KnobError, KnobSpace, RawChunk};

/// GPU cost of one backward pass, in units of one frame inference.
pub const BACKPROP_COST: f64 = 0.2;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Knob(#[from] KnobError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("block {block} does not divide shape {shape:?}")]
    Block { block: usize, shape: Vec<usize> },
    #[error("input gradient shape {actual:?} does not match pooled shape {pooled:?} with block {block}")]
    Conformability {
        actual: Vec<usize>,
        pooled: Vec<usize>,
        block: usize,
    },
}

pub type Result<T> = std::result::Result<T, EstimatorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorPolicy {
    /// Back-propagate through the last frame only and reuse that gradient
    /// for every frame of the interval.
    pub reuse_dnngrad: bool,
    pub mcu_block: usize,
    pub skip_parameter_gradients: bool,
}

impl Default for EstimatorPolicy {
    fn default() -> Self {
        EstimatorPolicy {
            reuse_dnngrad: true,
            mcu_block: 16,
            skip_parameter_gradients: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GradientEstimate {
    /// Accuracy gradient per knob, in accuracy units per normalized knob unit.
    pub acc_grad: Vec<f64>,
    /// Utility gradient per knob before conversion to accuracy units.
    pub output_grad: Vec<f64>,
    pub res_grad_bw: Vec<f64>,
    pub res_grad_gpu: Vec<f64>,
    pub backprops_used: usize,
    pub extra_inferences_used: usize,
}

/// Inference results of one filtered interval, with the retained forward
/// passes of the kept frames.
#[derive(Debug, Clone)]
pub struct IntervalInference {
    pub filtered: Filtered,
    /// One entry per native position; held positions repeat the result of
    /// the frame they show.
    pub results: Vec<InferenceResult>,
    traces: Vec<Option<FrameTrace>>,
    source: Vec<usize>,
}

impl IntervalInference {
    /// Runs the detector on every kept frame once.
    pub fn run(model: &DetectorModel, filtered: Filtered) -> Result<Self> {
        let source = filtered.source_of();
        let mut traces: Vec<Option<FrameTrace>> = Vec::with_capacity(source.len());
        let mut results = Vec::with_capacity(source.len());
        for (i, &s) in source.iter().enumerate() {
            if s == i {
                let t = model.trace(&filtered.frames[i], i)?;
                results.push(t.result.clone());
                traces.push(Some(t));
            } else {
                results.push(results[s].at_frame(i));
                traces.push(None);
            }
        }
        Ok(IntervalInference {
            filtered,
            results,
            traces,
            source,
        })
    }

    /// Number of frame inferences spent by [`IntervalInference::run`].
    pub fn inferences(&self) -> usize {
        self.traces.iter().filter(|t| t.is_some()).count()
    }

    /// Confident elements over all positions.
    pub fn confident_count(&self, threshold: f64) -> usize {
        self.results.iter().map(|r| r.count_confident(threshold)).sum()
    }
}

/// Filters and infers one interval.
pub fn infer_interval(
    model: &DetectorModel,
    space: &KnobSpace,
    chunk: &RawChunk,
    config: &Configuration,
) -> Result<IntervalInference> {
    let filtered = space.apply_config(chunk, config)?;
    IntervalInference::run(model, filtered)
}

/// Detector results keyed by frame contents, for callers that re-run many
/// configurations of the same chunk and need no backward pass.
#[derive(Debug, Default)]
pub struct InferenceCache {
    map: HashMap<Vec<u64>, InferenceResult>,
    pub misses: usize,
}

impl InferenceCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.map.clear();
    }

    /// Per-position results of a filtered interval, identical to
    /// [`IntervalInference::run`].
    pub fn results(&mut self, model: &DetectorModel, filtered: &Filtered) -> Result<Vec<InferenceResult>> {
        let source = filtered.source_of();
        let mut out: Vec<InferenceResult> = Vec::with_capacity(source.len());
        for (i, &s) in source.iter().enumerate() {
            if s != i {
                out.push(out[s].at_frame(i));
                continue;
            }
            let frame = &filtered.frames[i];
            let key: Vec<u64> = frame.data().iter().map(|v| v.to_bits()).collect();
            let hit = match self.map.get(&key) {
                Some(r) => r.at_frame(i),
                None => {
                    self.misses += 1;
                    let r = model.infer(frame, i)?;
                    self.map.insert(key, r.clone());
                    r
                }
            };
            out.push(hit);
        }
        Ok(out)
    }
}

/// Gradient of the output utility with respect to the stacked model input
/// and the number of backward passes it took.
pub fn dnn_grad(
    model: &DetectorModel,
    inference: &mut IntervalInference,
    policy: &EstimatorPolicy,
) -> Result<(NdArray, usize)> {
    let n = inference.source.len();
    let mut per_source: Vec<Option<NdArray>> = vec![None; n];
    let wanted: Vec<usize> = if policy.reuse_dnngrad {
        vec![inference.source[n - 1]]
    } else {
        let mut s = inference.source.clone();
        s.dedup();
        s
    };
    for &s in &wanted {
        let trace = inference.traces[s].as_mut().expect("kept frames are traced");
        per_source[s] = Some(model.utility_gradient(trace, policy.skip_parameter_gradients)?);
    }
    let frames: Vec<NdArray> = (0..n)
        .map(|i| {
            let s = if policy.reuse_dnngrad { wanted[0] } else { inference.source[i] };
            per_source[s].clone().expect("computed above")
        })
        .collect();
    Ok((NdArray::stack(&frames)?, wanted.len()))
}

fn split_plane(shape: &[usize]) -> Option<(usize, usize, usize)> {
    let n = shape.len();
    if n < 2 {
        return None;
    }
    let batch = shape[..n - 2].iter().product();
    Some((batch, shape[n - 2], shape[n - 1]))
}

/// Mean absolute value over each `block x block` tile of the last two axes.
pub fn pool_mcu(grad: &NdArray, block: usize) -> Result<NdArray> {
    let bad = || EstimatorError::Block {
        block,
        shape: grad.shape().to_vec(),
    };
    let (batch, h, w) = split_plane(grad.shape()).ok_or_else(bad)?;
    if block == 0 || h % block != 0 || w % block != 0 {
        return Err(bad());
    }
    let (ph, pw) = (h / block, w / block);
    let area = (block * block) as f64;
    let mut out = Vec::with_capacity(batch * ph * pw);
    let data = grad.data();
    for b in 0..batch {
        let plane = &data[b * h * w..(b + 1) * h * w];
        for br in 0..ph {
            for bc in 0..pw {
                let mut s = 0.0;
                for r in br * block..(br + 1) * block {
                    for c in bc * block..(bc + 1) * block {
                        s += plane[r * w + c].abs();
                    }
                }
                out.push(s / area);
            }
        }
    }
    let mut shape = grad.shape()[..grad.shape().len() - 2].to_vec();
    shape.extend([ph, pw]);
    Ok(NdArray::new(&shape, out)?)
}

/// Per-knob `sum over blocks of pooled_b * mean_b |input_grad|`.
pub fn acc_grad(pooled: &NdArray, input_grads: &[NdArray], block: usize) -> Result<Vec<f64>> {
    let (pb, ph, pw) = split_plane(pooled.shape()).ok_or(EstimatorError::Block {
        block,
        shape: pooled.shape().to_vec(),
    })?;
    let area = (block * block) as f64;
    let mut out = Vec::with_capacity(input_grads.len());
    for ig in input_grads {
        let conformable = match split_plane(ig.shape()) {
            Some((b, h, w)) => b == pb && h == ph * block && w == pw * block,
            None => false,
        };
        if !conformable {
            return Err(EstimatorError::Conformability {
                actual: ig.shape().to_vec(),
                pooled: pooled.shape().to_vec(),
                block,
            });
        }
        let (h, w) = (ph * block, pw * block);
        let mut total = 0.0;
        for b in 0..pb {
            let plane = &ig.data()[b * h * w..(b + 1) * h * w];
            for br in 0..ph {
                for bc in 0..pw {
                    let g = pooled.data()[(b * ph + br) * pw + bc];
                    if g == 0.0 {
                        continue;
                    }
                    let mut s = 0.0;
                    for r in br * block..(br + 1) * block {
                        for c in bc * block..(bc + 1) * block {
                            s += plane[r * w + c].abs();
                        }
                    }
                    total += g * s / area;
                }
            }
        }
        out.push(total);
    }
    Ok(out)
}

/// Forward differences of resource use per knob in normalized units
/// (backward differences at a knob's maximum). Returns (bytes, frames).
pub fn resource_grad(space: &KnobSpace, chunk: &RawChunk, config: &Configuration) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut bw = Vec::with_capacity(space.len());
    let mut gpu = Vec::with_capacity(space.len());
    for i in 0..space.len() {
        let (lo, hi) = space.neighbours(config, i)?;
        let step = space.knobs()[i].step();
        let a = space.resource_usage(chunk, &lo)?;
        let b = space.resource_usage(chunk, &hi)?;
        bw.push((b.bandwidth_bytes - a.bandwidth_bytes) / step);
        gpu.push((b.gpu_frames - a.gpu_frames) / step);
    }
    Ok((bw, gpu))
}

/// Model, knob space and scoring settings of one analytics pipeline.
#[derive(Debug, Clone, Copy)]
pub struct Pipeline<'a> {
    pub model: &'a DetectorModel,
    pub space: &'a KnobSpace,
    pub match_radius: usize,
}

impl Pipeline<'_> {
    pub fn accuracy(&self, results: &[InferenceResult], reference: &[InferenceResult], metric: Metric) -> f64 {
        let m = self.model;
        match metric {
            Metric::F1 => detector::accuracy(results, reference, m.threshold(), self.match_radius),
            Metric::Signed => {
                detector::accuracy_signed(results, reference, m.threshold(), m.sharpness(), self.match_radius)
            }
        }
    }

    /// Input gradients of every knob against an already filtered interval.
    /// Per-region knobs share one re-filtering. Returns the gradients and
    /// the number of re-filterings.
    pub fn input_grads(
        &self,
        chunk: &RawChunk,
        config: &Configuration,
        base: &Filtered,
    ) -> Result<(Vec<NdArray>, usize)> {
        let knobs = self.space.knobs();
        let mut grads: Vec<Option<NdArray>> = vec![None; knobs.len()];
        let mut refilters = 0;
        let group: Vec<usize> = (0..knobs.len())
            .filter(|&i| knobs[i].effect == Effect::RegionQuantization)
            .collect();
        if !group.is_empty() {
            let g = self.space.input_grad_nonoverlap_from(chunk, config, base, &group)?;
            refilters += g.refilters;
            for (&i, grad) in group.iter().zip(g.grads) {
                grads[i] = Some(grad);
            }
        }
        for (i, slot) in grads.iter_mut().enumerate() {
            if slot.is_none() {
                *slot = Some(self.space.input_grad_from(chunk, config, base, i)?);
                refilters += 1;
            }
        }
        Ok((grads.into_iter().map(|g| g.expect("filled")).collect(), refilters))
    }

    /// The decoupled estimate for an interval that has already been
    /// inferred under `config`. Spends one backward pass (or one per kept
    /// frame without reuse) and no inference.
    pub fn estimate(
        &self,
        chunk: &RawChunk,
        config: &Configuration,
        inference: &mut IntervalInference,
        policy: &EstimatorPolicy,
    ) -> Result<GradientEstimate> {
        let (grad, backprops) = dnn_grad(self.model, inference, policy)?;
        let pooled = pool_mcu(&grad, policy.mcu_block)?;
        let (input_grads, _) = self.input_grads(chunk, config, &inference.filtered)?;
        let output_grad = acc_grad(&pooled, &input_grads, policy.mcu_block)?;
        // A unit change of the smooth count is roughly one more or one fewer
        // confident element; near perfect agreement with the reference that
        // moves F1 by about 1 / (2 * count). The count is floored at one
        // element per position so that a degraded interval, which has lost
        // most of its detections, is not mistaken for a tiny reference. The
        // block area restores the per-pixel sum that the per-block mean
        // divided out.
        let positions = inference.results.len();
        let count = inference.confident_count(self.model.threshold()).max(positions).max(1) as f64;
        let area = (policy.mcu_block * policy.mcu_block) as f64;
        let acc = output_grad.iter().map(|g| g * area / (2.0 * count)).collect();
        let (res_grad_bw, res_grad_gpu) = resource_grad(self.space, chunk, config)?;
        Ok(GradientEstimate {
            acc_grad: acc,
            output_grad,
            res_grad_bw,
            res_grad_gpu,
            backprops_used: backprops,
            extra_inferences_used: 0,
        })
    }

    /// Filters, infers and estimates in one go.
    pub fn analyze(
        &self,
        chunk: &RawChunk,
        config: &Configuration,
        policy: &EstimatorPolicy,
    ) -> Result<(IntervalInference, GradientEstimate)> {
        let mut inference = infer_interval(self.model, self.space, chunk, config)?;
        let estimate = self.estimate(chunk, config, &mut inference, policy)?;
        Ok((inference, estimate))
    }

    /// Inference results under the most expensive configuration.
    pub fn reference(&self, chunk: &RawChunk) -> Result<Vec<InferenceResult>> {
        Ok(infer_interval(self.model, self.space, chunk, &self.space.max_config())?.results)
    }

    /// Accuracy gradient by definition: re-filter and re-infer at every
    /// neighbouring configuration.
    pub fn numerical_acc_grad(
        &self,
        chunk: &RawChunk,
        config: &Configuration,
        metric: Metric,
    ) -> Result<NumericalGradient> {
        let reference = self.reference(chunk)?;
        let base = infer_interval(self.model, self.space, chunk, config)?;
        let base_acc = self.accuracy(&base.results, &reference, metric);
        let mut grad = Vec::with_capacity(self.space.len());
        for i in 0..self.space.len() {
            let (lo, hi) = self.space.neighbours(config, i)?;
            let other = if &hi == config { &lo } else { &hi };
            let moved = infer_interval(self.model, self.space, chunk, other)?;
            let acc = self.accuracy(&moved.results, &reference, metric);
            grad.push((acc - base_acc).abs() / self.space.knobs()[i].step());
        }
        Ok(NumericalGradient {
            grad,
            inferences: self.space.len() + 2,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    #[default]
    F1,
    Signed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NumericalGradient {
    pub grad: Vec<f64>,
    /// Interval-level inference runs: the configuration itself, one per
    /// knob neighbour and the reference.
    pub inferences: usize,
}

/// Cosine similarity of two vectors. Two all-zero vectors count as
/// identical; exactly one all-zero vector scores 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => dot / (na * nb),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorSpec;
    use crate::knobs::KnobSpec;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn pooled_constant_and_alternating_blocks() {
        let g = NdArray::filled(&[4, 4], -0.25);
        assert_eq!(pool_mcu(&g, 4).unwrap().data(), &[0.25]);
        let alt = NdArray::new(&[4, 4], (0..16).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()).unwrap();
        assert_eq!(pool_mcu(&alt, 2).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn pooling_compresses_by_block_area() {
        let g = NdArray::new(&[32, 32], (0..1024).map(|i| (i as f64).sin()).collect()).unwrap();
        let p = pool_mcu(&g, 16).unwrap();
        assert_eq!(p.shape(), &[2, 2]);
        assert_eq!(g.len() / p.len(), 256);
    }

    #[test]
    fn pooling_rejects_indivisible_shape() {
        let g = NdArray::zeros(&[10, 12]);
        assert!(matches!(pool_mcu(&g, 4), Err(EstimatorError::Block { .. })));
    }

    #[test]
    fn acc_grad_null_cases() {
        let pooled = NdArray::filled(&[2, 1, 1], 0.5);
        let zero = NdArray::zeros(&[2, 4, 4]);
        let some = NdArray::filled(&[2, 4, 4], 2.0);
        let g = acc_grad(&pooled, &[zero.clone(), some.clone()], 4).unwrap();
        assert_eq!(g[0], 0.0);
        assert!(close(g[1], 2.0, 1e-12));
        let none = acc_grad(&NdArray::zeros(&[2, 1, 1]), &[some], 4).unwrap();
        assert_eq!(none, vec![0.0]);
        assert!(acc_grad(&pooled, &[NdArray::zeros(&[2, 8, 4])], 4).is_err());
    }

    #[test]
    fn worked_quotients() {
        // per-frame counts 3.4 -> 4.4 over a 5 fps step, and 3.4 -> 5.8 over
        // a 240-line step
        let frame_rate = (4.4 - 3.4) / (15.0 - 10.0);
        let resolution = (5.8 - 3.4) / (720.0 - 480.0);
        assert!(close(frame_rate, 0.2, 1e-12));
        assert!(close(resolution, 0.01, 1e-12));
    }

    #[test]
    fn cosine_conventions() {
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!(close(cosine(&[1.0, 2.0], &[2.0, 4.0]), 1.0, 1e-12));
        assert!(close(cosine(&[3.0], &[0.5]), 1.0, 1e-12));
    }

    fn setup() -> (DetectorModel, KnobSpace) {
        let model = DetectorModel::new(32, 32, &DetectorSpec::default());
        let space = KnobSpace::new(
            vec![
                KnobSpec::new("fps", Effect::FrameRate, &[1.0, 2.0, 5.0, 10.0]),
                KnobSpec::new("res", Effect::Resolution, &[0.5, 1.0]),
            ],
            32,
            32,
            10,
        )
        .unwrap();
        (model, space)
    }

    fn planted_chunk(model: &DetectorModel, step: isize) -> RawChunk {
        let frames = (0..10)
            .map(|i| {
                let mut f = NdArray::zeros(&[32, 32]);
                model.plant(&mut f, 0, 12, 8 + step * i as isize, 1.0);
                f
            })
            .collect();
        RawChunk {
            t: 1,
            frames,
            objects: Vec::new(),
        }
    }

    #[test]
    fn empty_frame_gradient_is_negligible() {
        let (model, space) = setup();
        let chunk = RawChunk {
            t: 1,
            frames: vec![NdArray::zeros(&[32, 32]); 10],
            objects: Vec::new(),
        };
        let mut inf = infer_interval(&model, &space, &chunk, &space.max_config()).unwrap();
        let (g, n) = dnn_grad(&model, &mut inf, &EstimatorPolicy::default()).unwrap();
        assert_eq!(n, 1);
        assert!(g.max_abs() < 1e-3);
    }

    #[test]
    fn gradient_concentrates_on_the_element() {
        let (model, space) = setup();
        let chunk = planted_chunk(&model, 0);
        let mut inf = infer_interval(&model, &space, &chunk, &space.max_config()).unwrap();
        let (g, _) = dnn_grad(&model, &mut inf, &EstimatorPolicy::default()).unwrap();
        let last = &g.data()[9 * 1024..];
        let (arg, _) = last
            .iter()
            .enumerate()
            .fold((0, 0.0), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
        let (r, c) = (arg / 32, arg % 32);
        assert!(r.abs_diff(12) <= 3 && c.abs_diff(8) <= 3, "argmax at ({r}, {c})");
    }

    #[test]
    fn reuse_matches_per_frame_on_static_scene() {
        let (model, space) = setup();
        let chunk = planted_chunk(&model, 0);
        let mut a = infer_interval(&model, &space, &chunk, &space.max_config()).unwrap();
        let mut b = a.clone();
        let on = EstimatorPolicy::default();
        let off = EstimatorPolicy {
            reuse_dnngrad: false,
            ..on
        };
        let (ga, na) = dnn_grad(&model, &mut a, &on).unwrap();
        let (gb, nb) = dnn_grad(&model, &mut b, &off).unwrap();
        assert_eq!((na, nb), (1, 10));
        assert_eq!(ga, gb);
    }

    #[test]
    fn decoupled_estimate_uses_no_inference() {
        let (model, space) = setup();
        let pipe = Pipeline {
            model: &model,
            space: &space,
            match_radius: 1,
        };
        let chunk = planted_chunk(&model, 2);
        let config = Configuration(vec![1, 1]);
        let (inf, est) = pipe.analyze(&chunk, &config, &EstimatorPolicy::default()).unwrap();
        assert_eq!(inf.inferences(), 2);
        assert_eq!(est.extra_inferences_used, 0);
        assert_eq!(est.backprops_used, 1);
        assert!(est.acc_grad.iter().all(|&g| g >= 0.0));
        assert!(est.acc_grad[0] > 0.0);
    }

    #[test]
    fn resource_gradient_examples() {
        let (_, space) = setup();
        let chunk = planted_chunk(&DetectorModel::new(32, 32, &DetectorSpec::default()), 0);
        // 5 -> 10 fps adds five frames over a step of 1/3
        let (bw, gpu) = resource_grad(&space, &chunk, &Configuration(vec![2, 1])).unwrap();
        assert!(close(gpu[0], 15.0, 1e-12));
        assert!(close(bw[0], 15.0 * 1024.0, 1e-9));
        // at the maximum the step-down difference is used
        let (_, top) = resource_grad(&space, &chunk, &space.max_config()).unwrap();
        assert!(close(top[0], 15.0, 1e-12));
        assert_eq!(top[1], 0.0);
    }

    #[test]
    fn numerical_gradient_examples() {
        let (model, _) = setup();
        // a still object: no knob step except resolution changes anything
        let coarse = KnobSpace::new(
            vec![
                KnobSpec::new("fps", Effect::FrameRate, &[1.0, 2.0, 5.0, 10.0]),
                KnobSpec::new("res", Effect::Resolution, &[0.25, 1.0]),
            ],
            32,
            32,
            10,
        )
        .unwrap();
        let pipe = Pipeline {
            model: &model,
            space: &coarse,
            match_radius: 1,
        };
        let chunk = planted_chunk(&model, 0);
        let g = pipe.numerical_acc_grad(&chunk, &Configuration(vec![0, 1]), Metric::F1).unwrap();
        assert_eq!(g.inferences, 4);
        assert_eq!(g.grad[0], 0.0);
        assert!(close(g.grad[1], 1.0, 1e-12));

        // hand re-run of a single knob
        let one = KnobSpace::new(vec![KnobSpec::new("fps", Effect::FrameRate, &[5.0, 10.0])], 32, 32, 10).unwrap();
        let pipe = Pipeline {
            model: &model,
            space: &one,
            match_radius: 1,
        };
        let moving = planted_chunk(&model, 2);
        let reference = pipe.reference(&moving).unwrap();
        let lo = infer_interval(&model, &one, &moving, &Configuration(vec![0])).unwrap();
        let expected = (1.0 - pipe.accuracy(&lo.results, &reference, Metric::F1)) / 1.0;
        let g = pipe.numerical_acc_grad(&moving, &Configuration(vec![0]), Metric::F1).unwrap();
        assert!(close(g.grad[0], expected, 1e-12));
        assert!(expected > 0.0);
    }
}
