//! Discrete filtering knobs, their effect on raw frames and input
//! difference quotients.
//!
//! Filtering runs in a fixed order: frame-rate decimation, frame-difference
//! dropping, resolution, uniform quantization, per-region quantization.
//! Dropped frames are replaced by the last kept frame, so every configuration
//! yields a stack of the same shape as the raw chunk.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::NdArray;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KnobError {
    #[error("knob `{name}`: {reason}")]
    InvalidSpec { name: String, reason: String },
    #[error("configuration has {actual} entries, expected {expected}")]
    ConfigLength { expected: usize, actual: usize },
    #[error("knob `{name}`: index {index} out of range (0..{len})")]
    InvalidIndex { name: String, index: usize, len: usize },
    #[error("knob index {0} does not exist")]
    UnknownKnob(usize),
    #[error("chunk has frames of shape {actual:?}, expected {expected:?}")]
    ChunkShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("regions of `{a}` and `{b}` overlap")]
    OverlappingRegions { a: String, b: String },
    #[error("knob `{0}` is not a per-region knob")]
    NotRegional(String),
}

pub type Result<T> = std::result::Result<T, KnobError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KnobKind {
    TemporalCoarse,
    TemporalFine,
    SpatialCoarse,
    SpatialFine,
}

/// What a knob does to the frames. `values` are interpreted per effect:
/// frames per interval, difference threshold, resolution scale, or number
/// of quantization levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Effect {
    FrameRate,
    FrameDiff,
    Resolution,
    Quantization,
    RegionQuantization,
}

impl Effect {
    pub fn kind(self) -> KnobKind {
        match self {
            Effect::FrameRate => KnobKind::TemporalCoarse,
            Effect::FrameDiff => KnobKind::TemporalFine,
            Effect::Resolution | Effect::Quantization => KnobKind::SpatialCoarse,
            Effect::RegionQuantization => KnobKind::SpatialFine,
        }
    }
}

/// Axis-aligned rectangle of grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.height && c >= self.col && c < self.col + self.width
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.row < other.row + other.height
            && other.row < self.row + self.height
            && self.col < other.col + other.width
            && other.col < self.col + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnobSpec {
    pub name: String,
    pub effect: Effect,
    /// Settings ordered by increasing resource use.
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
}

impl KnobSpec {
    pub fn new(name: &str, effect: Effect, values: &[f64]) -> Self {
        KnobSpec {
            name: name.to_string(),
            effect,
            values: values.to_vec(),
            region: None,
        }
    }

    pub fn regional(name: &str, values: &[f64], region: Region) -> Self {
        KnobSpec {
            name: name.to_string(),
            effect: Effect::RegionQuantization,
            values: values.to_vec(),
            region: Some(region),
        }
    }

    pub fn kind(&self) -> KnobKind {
        self.effect.kind()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Distance between neighbouring settings on the normalized [0, 1] axis.
    pub fn step(&self) -> f64 {
        1.0 / (self.values.len() - 1) as f64
    }

    pub fn max_index(&self) -> usize {
        self.values.len() - 1
    }
}

/// One index per knob into that knob's `values`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration(pub Vec<usize>);

impl Configuration {
    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn with(&self, knob: usize, index: usize) -> Configuration {
        let mut c = self.clone();
        c.0[knob] = index;
        c
    }
}

/// Position of a planted object in one frame; evaluation metadata only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectMark {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
    pub kind: usize,
}

/// One adaptation interval of raw frames at native resolution and rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RawChunk {
    pub t: usize,
    pub frames: Vec<NdArray>,
    pub objects: Vec<ObjectMark>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResourceUsage {
    pub bandwidth_bytes: f64,
    pub gpu_frames: f64,
}

/// Output of filtering one chunk under one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Filtered {
    /// One frame per native position; dropped positions hold the last kept
    /// frame.
    pub frames: Vec<NdArray>,
    pub kept: Vec<bool>,
    pub usage: ResourceUsage,
}

impl Filtered {
    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    /// For every position, the index of the kept frame it shows.
    pub fn source_of(&self) -> Vec<usize> {
        let mut last = 0;
        self.kept
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                if k {
                    last = i;
                }
                last
            })
            .collect()
    }

    pub fn stacked(&self) -> NdArray {
        NdArray::stack(&self.frames).expect("frames share a shape")
    }
}

/// Per-member input gradients of a region group and the number of
/// re-filterings spent computing them.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupGradients {
    pub grads: Vec<NdArray>,
    pub refilters: usize,
}

/// Validated set of knobs over a fixed frame geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct KnobSpace {
    knobs: Vec<KnobSpec>,
    height: usize,
    width: usize,
    native_frames: usize,
}

fn invalid(spec: &KnobSpec, reason: impl Into<String>) -> KnobError {
    KnobError::InvalidSpec {
        name: spec.name.clone(),
        reason: reason.into(),
    }
}

impl KnobSpace {
    pub fn new(knobs: Vec<KnobSpec>, height: usize, width: usize, native_frames: usize) -> Result<Self> {
        let mut seen = Vec::new();
        for k in &knobs {
            if k.values.len() < 2 {
                return Err(invalid(k, "needs at least two values"));
            }
            if k.values.iter().any(|v| !v.is_finite()) {
                return Err(invalid(k, "values must be finite"));
            }
            let ascending = k.values.windows(2).all(|w| w[0] < w[1]);
            let descending = k.values.windows(2).all(|w| w[0] > w[1]);
            match k.effect {
                Effect::FrameDiff => {
                    if !descending || k.values.iter().any(|&v| v < 0.0) {
                        return Err(invalid(k, "thresholds must be non-negative and strictly descending"));
                    }
                }
                _ if !ascending => {
                    return Err(invalid(k, "values must be strictly ascending"));
                }
                _ => {}
            }
            match k.effect {
                Effect::FrameRate => {
                    for &v in &k.values {
                        let n = v as usize;
                        if v != n as f64 || n == 0 || native_frames % n != 0 {
                            return Err(invalid(
                                k,
                                format!("frame rate {v} must divide the native {native_frames} frames"),
                            ));
                        }
                    }
                }
                Effect::Resolution => {
                    for &v in &k.values {
                        let f = (1.0 / v).round() as usize;
                        if v <= 0.0 || v > 1.0 || (1.0 / f as f64 - v).abs() > 1e-12 {
                            return Err(invalid(k, format!("scale {v} must be 1/n")));
                        }
                        if height % f != 0 || width % f != 0 {
                            return Err(invalid(k, format!("scale {v} must divide the frame size")));
                        }
                    }
                }
                Effect::Quantization | Effect::RegionQuantization => {
                    for &v in &k.values {
                        if v != v.round() || !(2.0..=256.0).contains(&v) {
                            return Err(invalid(k, format!("levels {v} must be an integer in 2..=256")));
                        }
                    }
                }
                Effect::FrameDiff => {}
            }
            match (k.effect, k.region) {
                (Effect::RegionQuantization, None) => return Err(invalid(k, "missing region")),
                (Effect::RegionQuantization, Some(r)) => {
                    if r.area() == 0 || r.row + r.height > height || r.col + r.width > width {
                        return Err(invalid(k, "region outside the frame"));
                    }
                }
                (_, Some(_)) => return Err(invalid(k, "only per-region knobs take a region")),
                _ => {
                    if seen.contains(&k.effect) {
                        return Err(invalid(k, "duplicate knob effect"));
                    }
                    seen.push(k.effect);
                }
            }
        }
        let regional: Vec<&KnobSpec> = knobs.iter().filter(|k| k.region.is_some()).collect();
        for (i, a) in regional.iter().enumerate() {
            for b in &regional[i + 1..] {
                if a.region.unwrap().overlaps(&b.region.unwrap()) {
                    return Err(KnobError::OverlappingRegions {
                        a: a.name.clone(),
                        b: b.name.clone(),
                    });
                }
            }
        }
        Ok(KnobSpace {
            knobs,
            height,
            width,
            native_frames,
        })
    }

    pub fn knobs(&self) -> &[KnobSpec] {
        &self.knobs
    }

    pub fn len(&self) -> usize {
        self.knobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knobs.is_empty()
    }

    pub fn frame_shape(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn native_frames(&self) -> usize {
        self.native_frames
    }

    /// The most expensive configuration.
    pub fn max_config(&self) -> Configuration {
        Configuration(self.knobs.iter().map(|k| k.max_index()).collect())
    }

    pub fn min_config(&self) -> Configuration {
        Configuration(vec![0; self.knobs.len()])
    }

    /// Number of distinct configurations, saturating.
    pub fn config_count(&self) -> usize {
        self.knobs.iter().fold(1usize, |acc, k| acc.saturating_mul(k.len()))
    }

    /// Every configuration in lexicographic order.
    pub fn all_configs(&self) -> Vec<Configuration> {
        let mut out = vec![Vec::with_capacity(self.knobs.len())];
        for k in &self.knobs {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    (0..k.len()).map(move |i| {
                        let mut p = prefix.clone();
                        p.push(i);
                        p
                    })
                })
                .collect();
        }
        out.into_iter().map(Configuration).collect()
    }

    pub fn validate(&self, config: &Configuration) -> Result<()> {
        if config.len() != self.knobs.len() {
            return Err(KnobError::ConfigLength {
                expected: self.knobs.len(),
                actual: config.len(),
            });
        }
        for (k, &i) in self.knobs.iter().zip(config.indices()) {
            if i >= k.len() {
                return Err(KnobError::InvalidIndex {
                    name: k.name.clone(),
                    index: i,
                    len: k.len(),
                });
            }
        }
        Ok(())
    }

    fn check_chunk(&self, chunk: &RawChunk) -> Result<()> {
        let expected = vec![self.height, self.width];
        if chunk.frames.is_empty() {
            return Err(KnobError::ChunkShape {
                expected,
                actual: vec![0],
            });
        }
        for f in &chunk.frames {
            if f.shape() != expected.as_slice() {
                return Err(KnobError::ChunkShape {
                    expected,
                    actual: f.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    fn value(&self, config: &Configuration, effect: Effect) -> Option<f64> {
        self.knobs
            .iter()
            .zip(config.indices())
            .find(|(k, _)| k.effect == effect)
            .map(|(k, &i)| k.values[i])
    }

    /// Which native positions survive the temporal knobs.
    pub fn kept_frames(&self, chunk: &RawChunk, config: &Configuration) -> Result<Vec<bool>> {
        self.validate(config)?;
        self.check_chunk(chunk)?;
        let n = chunk.frames.len();
        let every = match self.value(config, Effect::FrameRate) {
            Some(fps) => (self.native_frames / fps as usize).max(1),
            None => 1,
        };
        let mut kept: Vec<bool> = (0..n).map(|i| i % every == 0).collect();
        let diff = self
            .knobs
            .iter()
            .zip(config.indices())
            .find(|(k, _)| k.effect == Effect::FrameDiff);
        if let Some((spec, &level)) = diff {
            // thresholds are applied from the highest down to the selected
            // one; frames kept at a higher threshold stay kept, so lowering
            // the threshold never drops a frame
            let candidates = kept.clone();
            let mut forced = vec![false; n];
            for &threshold in &spec.values[..=level] {
                let mut last = 0;
                for i in 0..n {
                    if !candidates[i] {
                        continue;
                    }
                    let keep = i == 0
                        || forced[i]
                        || mean_abs_diff(&chunk.frames[i], &chunk.frames[last]) >= threshold;
                    kept[i] = keep;
                    if keep {
                        last = i;
                    }
                }
                forced.clone_from(&kept);
            }
        }
        Ok(kept)
    }

    fn spatial(&self, frame: &NdArray, config: &Configuration) -> NdArray {
        let mut out = frame.clone();
        if let Some(scale) = self.value(config, Effect::Resolution) {
            let f = (1.0 / scale).round() as usize;
            if f > 1 {
                out = box_resample(&out, f);
            }
        }
        if let Some(q) = self.value(config, Effect::Quantization) {
            let q = q as usize;
            out.data_mut().iter_mut().for_each(|v| *v = quantize(*v, q));
        }
        for (k, &i) in self.knobs.iter().zip(config.indices()) {
            if let (Effect::RegionQuantization, Some(region)) = (k.effect, k.region) {
                quantize_region(&mut out, &region, k.values[i] as usize);
            }
        }
        out
    }

    /// Filters a chunk under `config`.
    pub fn apply_config(&self, chunk: &RawChunk, config: &Configuration) -> Result<Filtered> {
        let kept = self.kept_frames(chunk, config)?;
        let mut frames: Vec<NdArray> = Vec::with_capacity(kept.len());
        for (i, &k) in kept.iter().enumerate() {
            if k {
                frames.push(self.spatial(&chunk.frames[i], config));
            } else {
                let held = frames[i - 1].clone();
                frames.push(held);
            }
        }
        let usage = self.usage_for(&kept, config);
        Ok(Filtered { frames, kept, usage })
    }

    /// Encoded bytes of one kept frame under the size model.
    pub fn frame_bytes(&self, config: &Configuration) -> f64 {
        let scale = self.value(config, Effect::Resolution).unwrap_or(1.0);
        let global = self.value(config, Effect::Quantization).unwrap_or(256.0);
        let pixels = (self.height * self.width) as f64;
        let mut covered = 0.0;
        let mut bits = 0.0;
        for (k, &i) in self.knobs.iter().zip(config.indices()) {
            if let Some(region) = k.region {
                let q = k.values[i].min(global);
                let frac = region.area() as f64 / pixels;
                covered += frac;
                bits += frac * q.log2();
            }
        }
        bits += (1.0 - covered) * global.log2();
        pixels * scale * scale * bits / 8.0
    }

    fn usage_for(&self, kept: &[bool], config: &Configuration) -> ResourceUsage {
        let n = kept.iter().filter(|&&k| k).count() as f64;
        ResourceUsage {
            bandwidth_bytes: n * self.frame_bytes(config),
            gpu_frames: n,
        }
    }

    /// Closed-form resource use; only the temporal knobs look at pixels.
    pub fn resource_usage(&self, chunk: &RawChunk, config: &Configuration) -> Result<ResourceUsage> {
        let kept = self.kept_frames(chunk, config)?;
        Ok(self.usage_for(&kept, config))
    }

    /// The pair of configurations a knob's difference quotient is taken over:
    /// one step up, or one step down when the knob is already at its maximum.
    /// Returns (lower, upper).
    pub fn neighbours(&self, config: &Configuration, knob: usize) -> Result<(Configuration, Configuration)> {
        self.validate(config)?;
        let spec = self.knobs.get(knob).ok_or(KnobError::UnknownKnob(knob))?;
        let i = config.indices()[knob];
        Ok(if i < spec.max_index() {
            (config.clone(), config.with(knob, i + 1))
        } else {
            (config.with(knob, i - 1), config.clone())
        })
    }

    /// `(y(k + dk_i) - y(k)) / dk_i` over the stacked DNN input.
    pub fn input_grad(&self, chunk: &RawChunk, config: &Configuration, knob: usize) -> Result<NdArray> {
        let base = self.apply_config(chunk, config)?;
        self.input_grad_from(chunk, config, &base, knob)
    }

    /// As [`KnobSpace::input_grad`], reusing an already filtered `base`.
    pub fn input_grad_from(
        &self,
        chunk: &RawChunk,
        config: &Configuration,
        base: &Filtered,
        knob: usize,
    ) -> Result<NdArray> {
        let (lo, hi) = self.neighbours(config, knob)?;
        let step = self.knobs[knob].step();
        let other = if &hi == config { &lo } else { &hi };
        let moved = self.apply_config(chunk, other)?;
        let (upper, lower) = if &hi == config { (base, &moved) } else { (&moved, base) };
        Ok(difference(&upper.frames, &lower.frames, step, None))
    }

    /// Input gradients of several per-region knobs from a single
    /// re-filtering with all of them moved at once.
    pub fn input_grad_nonoverlap(
        &self,
        chunk: &RawChunk,
        config: &Configuration,
        group: &[usize],
    ) -> Result<GroupGradients> {
        let base = self.apply_config(chunk, config)?;
        self.input_grad_nonoverlap_from(chunk, config, &base, group)
    }

    pub fn input_grad_nonoverlap_from(
        &self,
        chunk: &RawChunk,
        config: &Configuration,
        base: &Filtered,
        group: &[usize],
    ) -> Result<GroupGradients> {
        self.validate(config)?;
        let mut regions: Vec<(usize, Region)> = Vec::with_capacity(group.len());
        for &g in group {
            let spec = self.knobs.get(g).ok_or(KnobError::UnknownKnob(g))?;
            let region = spec.region.ok_or_else(|| KnobError::NotRegional(spec.name.clone()))?;
            for &(other, r) in &regions {
                if other == g || region.overlaps(&r) {
                    return Err(KnobError::OverlappingRegions {
                        a: self.knobs[other].name.clone(),
                        b: spec.name.clone(),
                    });
                }
            }
            regions.push((g, region));
        }
        let mut joint = config.clone();
        let mut up = Vec::with_capacity(group.len());
        for &g in group {
            let i = config.indices()[g];
            let stepping_up = i < self.knobs[g].max_index();
            joint.0[g] = if stepping_up { i + 1 } else { i - 1 };
            up.push(stepping_up);
        }
        let moved = self.apply_config(chunk, &joint)?;
        let grads = regions
            .iter()
            .zip(&up)
            .map(|(&(g, region), &stepping_up)| {
                let (upper, lower) = if stepping_up { (&moved, base) } else { (base, &moved) };
                difference(&upper.frames, &lower.frames, self.knobs[g].step(), Some(&region))
            })
            .collect();
        Ok(GroupGradients { grads, refilters: 1 })
    }
}

/// Stacked `(upper - lower) / step`, optionally zero outside `region`.
fn difference(upper: &[NdArray], lower: &[NdArray], step: f64, region: Option<&Region>) -> NdArray {
    let shape = upper[0].shape().to_vec();
    let w = shape[1];
    let mut data = Vec::with_capacity(upper.len() * upper[0].len());
    for (u, l) in upper.iter().zip(lower) {
        for (p, (a, b)) in u.data().iter().zip(l.data()).enumerate() {
            let inside = region.is_none_or(|r| r.contains(p / w, p % w));
            data.push(if inside { (a - b) / step } else { 0.0 });
        }
    }
    let mut full = vec![upper.len()];
    full.extend(shape);
    NdArray::new(&full, data).expect("conformable frames")
}

pub fn mean_abs_diff(a: &NdArray, b: &NdArray) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    s / a.len() as f64
}

/// Rounds `v` (clamped to [0, 1]) to the nearest of `levels` evenly spaced
/// values.
pub fn quantize(v: f64, levels: usize) -> f64 {
    let m = (levels - 1) as f64;
    (v.clamp(0.0, 1.0) * m).round() / m
}

fn quantize_region(frame: &mut NdArray, region: &Region, levels: usize) {
    let w = frame.shape()[1];
    let data = frame.data_mut();
    for r in region.row..region.row + region.height {
        for c in region.col..region.col + region.width {
            let v = &mut data[r * w + c];
            *v = quantize(*v, levels);
        }
    }
}

/// Box-downsample by `factor`, then nearest-upsample back to the original
/// grid.
pub fn box_resample(frame: &NdArray, factor: usize) -> NdArray {
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let src = frame.data();
    let mut out = vec![0.0; h * w];
    let area = (factor * factor) as f64;
    for br in (0..h).step_by(factor) {
        for bc in (0..w).step_by(factor) {
            let mut s = 0.0;
            for r in br..br + factor {
                for c in bc..bc + factor {
                    s += src[r * w + c];
                }
            }
            let mean = s / area;
            for r in br..br + factor {
                for c in bc..bc + factor {
                    out[r * w + c] = mean;
                }
            }
        }
    }
    NdArray::new(&[h, w], out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eight_bit(v: f64) -> f64 {
        (v * 255.0).round() / 255.0
    }

    fn chunk(frames: Vec<NdArray>) -> RawChunk {
        RawChunk {
            t: 1,
            frames,
            objects: Vec::new(),
        }
    }

    fn ramp_frames(n: usize, h: usize, w: usize) -> Vec<NdArray> {
        (0..n)
            .map(|f| {
                let data = (0..h * w)
                    .map(|p| eight_bit(((p * 7 + f * 13) % 97) as f64 / 97.0))
                    .collect();
                NdArray::new(&[h, w], data).unwrap()
            })
            .collect()
    }

    fn standard(h: usize, w: usize) -> KnobSpace {
        KnobSpace::new(
            vec![
                KnobSpec::new("fps", Effect::FrameRate, &[1.0, 2.0, 5.0, 10.0]),
                KnobSpec::new("diff", Effect::FrameDiff, &[0.05, 0.01, 0.0]),
                KnobSpec::new("res", Effect::Resolution, &[0.25, 0.5, 1.0]),
                KnobSpec::new("quant", Effect::Quantization, &[4.0, 16.0, 256.0]),
            ],
            h,
            w,
            10,
        )
        .unwrap()
    }

    #[test]
    fn max_config_is_identity() {
        let space = standard(8, 8);
        let c = chunk(ramp_frames(10, 8, 8));
        let out = space.apply_config(&c, &space.max_config()).unwrap();
        assert_eq!(out.frames, c.frames);
        assert_eq!(out.usage.gpu_frames, 10.0);
    }

    #[test]
    fn every_second_frame_keeps_five() {
        let space = standard(8, 8);
        let c = chunk(ramp_frames(10, 8, 8));
        let config = Configuration(vec![2, 2, 2, 2]);
        let out = space.apply_config(&c, &config).unwrap();
        assert_eq!(out.kept_count(), 5);
        assert_eq!(out.kept, [true, false].repeat(5));
        assert_eq!(out.frames[3], out.frames[2]);
    }

    #[test]
    fn four_levels_snap_values() {
        assert_eq!(quantize(0.1, 4), 0.0);
        assert_eq!(quantize(0.6, 4), 2.0 / 3.0);
        assert_eq!(quantize(0.9, 4), 1.0);
        assert_eq!(quantize(0.2, 4), 1.0 / 3.0);
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = |k: KnobSpec| KnobSpace::new(vec![k], 8, 8, 10).is_err();
        assert!(bad(KnobSpec::new("a", Effect::FrameRate, &[5.0])));
        assert!(bad(KnobSpec::new("a", Effect::FrameRate, &[3.0, 10.0])));
        assert!(bad(KnobSpec::new("a", Effect::FrameDiff, &[0.0, 0.1])));
        assert!(bad(KnobSpec::new("a", Effect::Resolution, &[1.0, 0.5])));
        assert!(bad(KnobSpec::new("a", Effect::Resolution, &[0.3, 1.0])));
        assert!(bad(KnobSpec::new("a", Effect::Quantization, &[1.0, 4.0])));
        assert!(bad(KnobSpec::new("a", Effect::RegionQuantization, &[2.0, 4.0])));
        let r = Region {
            row: 0,
            col: 0,
            height: 4,
            width: 4,
        };
        let overlapping = KnobSpace::new(
            vec![
                KnobSpec::regional("a", &[2.0, 4.0], r),
                KnobSpec::regional("b", &[2.0, 4.0], Region { row: 3, ..r }),
            ],
            8,
            8,
            10,
        );
        assert!(matches!(overlapping, Err(KnobError::OverlappingRegions { .. })));
    }

    #[test]
    fn invalid_index_is_rejected() {
        let space = standard(8, 8);
        let c = chunk(ramp_frames(10, 8, 8));
        let err = space.apply_config(&c, &Configuration(vec![0, 0, 3, 0])).unwrap_err();
        assert!(matches!(err, KnobError::InvalidIndex { index: 3, .. }));
        assert!(space.apply_config(&c, &Configuration(vec![0, 0])).is_err());
    }

    #[test]
    fn unchanged_quantization_gives_zero_gradient() {
        // values already on the 4-level grid do not move when levels rise to 16
        let space = KnobSpace::new(
            vec![KnobSpec::new("quant", Effect::Quantization, &[4.0, 16.0])],
            4,
            4,
            10,
        )
        .unwrap();
        let frame = NdArray::new(&[4, 4], (0..16).map(|p| (p % 4) as f64 / 3.0).collect()).unwrap();
        let c = chunk(vec![frame; 10]);
        let g = space.input_grad(&c, &Configuration(vec![0]), 0).unwrap();
        assert_eq!(g.shape(), &[10, 4, 4]);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resolution_gradient_sits_on_the_edge() {
        let space = KnobSpace::new(
            vec![KnobSpec::new("res", Effect::Resolution, &[0.5, 1.0])],
            8,
            8,
            10,
        )
        .unwrap();
        // vertical edge between columns 4 and 5; 2x2 blocks straddle it at columns 4..6
        let data = (0..64).map(|p| if p % 8 >= 5 { 1.0 } else { 0.0 }).collect();
        let c = chunk(vec![NdArray::new(&[8, 8], data).unwrap(); 10]);
        let g = space.input_grad(&c, &Configuration(vec![0]), 0).unwrap();
        // oracle: direct subtraction of the two filtered frames
        let hi = c.frames[0].clone();
        let lo = box_resample(&hi, 2);
        for p in 0..64 {
            let expected = (hi.data()[p] - lo.data()[p]) / 1.0;
            assert_eq!(g.data()[p], expected);
            let col = p % 8;
            if expected != 0.0 {
                assert!(col == 4 || col == 5);
            }
        }
        assert!(g.max_abs() > 0.0);
    }

    #[test]
    fn frame_rate_gradient_on_new_frames_only() {
        let space = KnobSpace::new(
            vec![KnobSpec::new("fps", Effect::FrameRate, &[5.0, 10.0])],
            4,
            4,
            10,
        )
        .unwrap();
        let c = chunk(ramp_frames(10, 4, 4));
        let g = space.input_grad(&c, &Configuration(vec![0]), 0).unwrap();
        for f in 0..10 {
            let slice = &g.data()[f * 16..(f + 1) * 16];
            let nonzero = slice.iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, f % 2 == 1, "frame {f}");
        }
    }

    #[test]
    fn gradient_at_max_uses_step_down() {
        let space = KnobSpace::new(
            vec![KnobSpec::new("fps", Effect::FrameRate, &[5.0, 10.0])],
            4,
            4,
            10,
        )
        .unwrap();
        let c = chunk(ramp_frames(10, 4, 4));
        let up = space.input_grad(&c, &Configuration(vec![0]), 0).unwrap();
        let down = space.input_grad(&c, &Configuration(vec![1]), 0).unwrap();
        assert_eq!(up, down);
    }

    #[test]
    fn frame_diff_threshold_drops_static_frames() {
        let space = KnobSpace::new(
            vec![KnobSpec::new("diff", Effect::FrameDiff, &[0.01, 0.0])],
            4,
            4,
            10,
        )
        .unwrap();
        let still = NdArray::filled(&[4, 4], 0.2);
        let c = chunk(vec![still; 10]);
        let kept = space.kept_frames(&c, &Configuration(vec![0])).unwrap();
        assert_eq!(kept.iter().filter(|&&k| k).count(), 1);
        let kept = space.kept_frames(&c, &Configuration(vec![1])).unwrap();
        assert!(kept.iter().all(|&k| k));
    }

    #[test]
    fn halving_resolution_quarters_bytes() {
        let space = standard(8, 8);
        let full = space.frame_bytes(&Configuration(vec![3, 2, 2, 2]));
        let half = space.frame_bytes(&Configuration(vec![3, 2, 1, 2]));
        assert_eq!(full, 64.0);
        assert!((half - full * 0.25).abs() < 1e-12);
    }

    #[test]
    fn single_kept_frame_costs_one() {
        let space = standard(8, 8);
        let c = chunk(vec![NdArray::filled(&[8, 8], 0.5); 10]);
        let usage = space.resource_usage(&c, &Configuration(vec![0, 0, 0, 0])).unwrap();
        assert_eq!(usage.gpu_frames, 1.0);
    }

    #[test]
    fn max_config_has_max_usage() {
        let space = standard(8, 8);
        let c = chunk(ramp_frames(10, 8, 8));
        let top = space.resource_usage(&c, &space.max_config()).unwrap();
        for cfg in space.all_configs() {
            let u = space.resource_usage(&c, &cfg).unwrap();
            assert!(u.bandwidth_bytes <= top.bandwidth_bytes);
            assert!(u.gpu_frames <= top.gpu_frames);
        }
    }

    fn quadrants(levels: &[f64]) -> KnobSpace {
        let q = |row, col| Region {
            row,
            col,
            height: 4,
            width: 4,
        };
        KnobSpace::new(
            vec![
                KnobSpec::regional("q0", levels, q(0, 0)),
                KnobSpec::regional("q1", levels, q(0, 4)),
                KnobSpec::regional("q2", levels, q(4, 0)),
                KnobSpec::regional("q3", levels, q(4, 4)),
            ],
            8,
            8,
            10,
        )
        .unwrap()
    }

    #[test]
    fn quadrant_group_matches_individual_gradients() {
        let space = quadrants(&[2.0, 4.0, 256.0]);
        let c = chunk(ramp_frames(10, 8, 8));
        let config = Configuration(vec![0, 1, 2, 1]);
        let group = space.input_grad_nonoverlap(&c, &config, &[0, 1, 2, 3]).unwrap();
        assert_eq!(group.refilters, 1);
        for (i, g) in group.grads.iter().enumerate() {
            assert_eq!(g, &space.input_grad(&c, &config, i).unwrap());
        }
        let single = space.input_grad_nonoverlap(&c, &config, &[2]).unwrap();
        assert_eq!(single.grads[0], space.input_grad(&c, &config, 2).unwrap());
    }

    #[test]
    fn group_rejects_repeated_member() {
        let space = quadrants(&[2.0, 4.0]);
        let c = chunk(ramp_frames(10, 8, 8));
        let err = space.input_grad_nonoverlap(&c, &Configuration(vec![0; 4]), &[1, 1]);
        assert!(matches!(err, Err(KnobError::OverlappingRegions { .. })));
    }
}
