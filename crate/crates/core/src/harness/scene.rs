//! Synthetic scenes: planted detector patterns moving along horizontal lanes
//! over a flat or drifting background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::NdArray;
use crate::detector::DetectorModel;
use crate::knobs::{ObjectMark, RawChunk};

/// Shortest allowed phase, in intervals.
pub const MIN_PHASE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase {
    pub intervals: usize,
    pub objects: usize,
    /// Cells per native frame.
    pub speed: f64,
    /// Contrast is drawn uniformly from this range per object.
    pub contrast: [f64; 2],
}

impl Default for Phase {
    fn default() -> Self {
        Phase {
            intervals: 60,
            objects: 3,
            speed: 0.0,
            contrast: [0.7, 1.0],
        }
    }
}

/// Low-frequency sinusoid drifting across the frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundMotion {
    pub amplitude: f64,
    /// Wavelength in cells.
    pub wavelength: f64,
    /// Cells per native frame.
    pub speed: f64,
}

impl Default for BackgroundMotion {
    fn default() -> Self {
        BackgroundMotion {
            amplitude: 0.1,
            wavelength: 16.0,
            speed: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames_per_interval: usize,
    pub background: f64,
    pub noise: f64,
    pub background_motion: Option<BackgroundMotion>,
    pub seed: u64,
    pub phases: Vec<Phase>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 32,
            width: 32,
            frames_per_interval: 10,
            background: 0.0,
            noise: 0.005,
            background_motion: None,
            seed: 7,
            phases: vec![Phase::default()],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.height < 16 || self.width < 16 {
            return Err("scene must be at least 16x16".into());
        }
        if self.frames_per_interval == 0 {
            return Err("frames_per_interval must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err("background must lie in [0, 1]".into());
        }
        if !(self.noise >= 0.0) {
            return Err("noise must be non-negative".into());
        }
        if self.phases.is_empty() {
            return Err("at least one phase is required".into());
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.intervals < MIN_PHASE {
                return Err(format!("phase {i} lasts {} intervals, minimum is {MIN_PHASE}", p.intervals));
            }
            if p.contrast[0] > p.contrast[1] || p.contrast[0] < 0.0 {
                return Err(format!("phase {i} has an invalid contrast range"));
            }
            if !p.speed.is_finite() || p.speed < 0.0 {
                return Err(format!("phase {i} has an invalid speed"));
            }
        }
        Ok(())
    }

    /// First interval of every phase after the first.
    pub fn phase_changes(&self) -> Vec<usize> {
        let mut start = 1;
        let mut out = Vec::new();
        for p in &self.phases[..self.phases.len() - 1] {
            start += p.intervals;
            out.push(start);
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct Mover {
    row: usize,
    col: f64,
    direction: f64,
    contrast: f64,
    kind: usize,
}

/// A scene that can produce the chunk of any interval on demand.
#[derive(Debug, Clone)]
pub struct Scene {
    spec: SceneSpec,
    lanes: Vec<usize>,
    movers: Vec<Vec<Mover>>,
    lo: usize,
    span: usize,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

impl Scene {
    pub fn new(spec: SceneSpec, model: &DetectorModel) -> Result<Self, String> {
        spec.validate()?;
        if model.frame_shape() != [spec.height, spec.width] {
            return Err("detector and scene frame sizes differ".into());
        }
        // objects stay far enough from the border for every cell of the
        // pattern to be scored
        let lo = model.margin() + 1;
        let hi = spec.height - lo;
        let lanes: Vec<usize> = (lo..hi).step_by(6).collect();
        let span = spec.width - 2 * lo;
        let mut movers = Vec::with_capacity(spec.phases.len());
        for (i, p) in spec.phases.iter().enumerate() {
            if p.objects > lanes.len() {
                return Err(format!("phase {i} asks for {} objects, at most {} fit", p.objects, lanes.len()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 1, i as u64));
            let mut free = lanes.clone();
            let mut set = Vec::with_capacity(p.objects);
            for _ in 0..p.objects {
                let lane = free.remove(rng.random_range(0..free.len()));
                set.push(Mover {
                    row: lane,
                    col: rng.random_range(0.0..span as f64),
                    direction: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
                    contrast: rng.random_range(p.contrast[0]..=p.contrast[1]),
                    kind: rng.random_range(0..model.kinds()),
                });
            }
            movers.push(set);
        }
        Ok(Scene {
            spec,
            lanes,
            movers,
            lo,
            span,
        })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn lanes(&self) -> &[usize] {
        &self.lanes
    }

    /// Phase index and the first interval of that phase.
    pub fn phase_at(&self, t: usize) -> (usize, usize) {
        let mut start = 1;
        for (i, p) in self.spec.phases.iter().enumerate() {
            if t < start + p.intervals || i + 1 == self.spec.phases.len() {
                return (i, start);
            }
            start += p.intervals;
        }
        unreachable!("phases are non-empty")
    }

    /// Raw frames of interval `t` (1-based).
    pub fn chunk(&self, t: usize, model: &DetectorModel) -> RawChunk {
        assert!(t >= 1, "intervals are numbered from 1");
        let (phase, start) = self.phase_at(t);
        let speed = self.spec.phases[phase].speed;
        let n = self.spec.frames_per_interval;
        let (h, w) = (self.spec.height, self.spec.width);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.spec.seed, 2, t as u64));
        let noise = Normal::new(0.0, self.spec.noise).expect("non-negative noise");
        let mut frames = Vec::with_capacity(n);
        let mut objects = Vec::new();
        for i in 0..n {
            let global = ((t - 1) * n + i) as f64;
            let local = ((t - start) * n + i) as f64;
            let mut frame = NdArray::filled(&[h, w], self.spec.background);
            if let Some(m) = self.spec.background_motion {
                let data = frame.data_mut();
                for (p, v) in data.iter_mut().enumerate() {
                    let c = (p % w) as f64;
                    let phase = 2.0 * std::f64::consts::PI * (c - m.speed * global) / m.wavelength;
                    *v += m.amplitude * phase.sin();
                }
            }
            for mv in &self.movers[phase] {
                let travelled = mv.col + mv.direction * speed * local;
                let col = self.lo + (travelled.round().rem_euclid(self.span as f64)) as usize;
                model.plant(&mut frame, mv.kind, mv.row as isize, col as isize, mv.contrast);
                objects.push(ObjectMark {
                    frame: i,
                    row: mv.row,
                    col,
                    kind: mv.kind,
                });
            }
            for v in frame.data_mut() {
                let noisy = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                *v = (noisy * 255.0).round() / 255.0;
            }
            frames.push(frame);
        }
        RawChunk { t, frames, objects }
    }

    pub fn chunks(&self, intervals: usize, model: &DetectorModel) -> Vec<RawChunk> {
        (1..=intervals).map(|t| self.chunk(t, model)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorSpec;

    fn model() -> DetectorModel {
        DetectorModel::new(32, 32, &DetectorSpec::default())
    }

    #[test]
    fn chunks_are_deterministic_and_eight_bit() {
        let m = model();
        let scene = Scene::new(SceneSpec::default(), &m).unwrap();
        let a = scene.chunk(3, &m);
        let b = scene.chunk(3, &m);
        assert_eq!(a, b);
        assert_eq!(a.frames.len(), 10);
        for v in a.frames[0].data() {
            assert_eq!((*v * 255.0).round() / 255.0, *v);
        }
    }

    #[test]
    fn short_phase_is_rejected() {
        let spec = SceneSpec {
            phases: vec![Phase {
                intervals: 2,
                ..Phase::default()
            }],
            ..SceneSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn phase_lookup() {
        let m = model();
        let spec = SceneSpec {
            phases: vec![
                Phase {
                    intervals: 9,
                    ..Phase::default()
                },
                Phase {
                    intervals: 5,
                    ..Phase::default()
                },
            ],
            ..SceneSpec::default()
        };
        assert_eq!(spec.phase_changes(), vec![10]);
        let scene = Scene::new(spec, &m).unwrap();
        assert_eq!(scene.phase_at(9), (0, 1));
        assert_eq!(scene.phase_at(10), (1, 10));
        assert_eq!(scene.phase_at(40), (1, 10));
    }

    #[test]
    fn planted_objects_are_detected() {
        let m = model();
        let scene = Scene::new(SceneSpec::default(), &m).unwrap();
        let chunk = scene.chunk(1, &m);
        for (i, f) in chunk.frames.iter().enumerate() {
            let r = m.infer(f, i).unwrap();
            let marks: Vec<_> = chunk.objects.iter().filter(|o| o.frame == i).collect();
            assert_eq!(r.count_confident(m.threshold()), marks.len());
            for o in marks {
                assert!(r.confident(m.threshold()).any(|e| e.row == o.row && e.col == o.col));
            }
        }
    }
}
