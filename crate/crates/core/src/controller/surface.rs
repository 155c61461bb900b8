//! Analytic separable objectives that exercise the controller without a
//! detector. Each knob contributes a concave, increasing accuracy term and a
//! linear cost, so the exact optimum is known by enumeration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{normalize, ControllerParams, ControllerState, ResourceWeights};
use crate::estimator::GradientEstimate;
use crate::knobs::{Configuration, Effect, KnobSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceKnob {
    pub values: usize,
    /// Accuracy gained between the lowest and the highest value.
    pub gain: f64,
    /// Curvature of the saturating accuracy curve.
    pub rate: f64,
    /// Cost of moving from the lowest to the highest value.
    pub cost: f64,
}

impl SurfaceKnob {
    /// `gain * (1 - exp(-rate x)) / (1 - exp(-rate))` at normalized `x`.
    pub fn accuracy(&self, x: f64) -> f64 {
        self.gain * (1.0 - (-self.rate * x).exp()) / (1.0 - (-self.rate).exp())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparableSurface {
    pub knobs: Vec<SurfaceKnob>,
}

impl SeparableSurface {
    pub fn specs(&self) -> Vec<KnobSpec> {
        self.knobs
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let values: Vec<f64> = (1..=k.values).map(|v| v as f64).collect();
                KnobSpec::new(&format!("k{i}"), Effect::FrameRate, &values)
            })
            .collect()
    }

    fn positions(&self, config: &Configuration) -> Vec<f64> {
        self.specs().iter().zip(config.indices()).map(|(s, &i)| normalize(s, i)).collect()
    }

    pub fn accuracy(&self, config: &Configuration) -> f64 {
        self.knobs.iter().zip(self.positions(config)).map(|(k, x)| k.accuracy(x)).sum()
    }

    pub fn cost(&self, config: &Configuration) -> f64 {
        self.knobs.iter().zip(self.positions(config)).map(|(k, x)| k.cost * x).sum()
    }

    pub fn objective(&self, config: &Configuration, lambda: f64) -> f64 {
        self.accuracy(config) - lambda * self.cost(config)
    }

    /// Difference quotients in the estimator's convention: one step up, or
    /// one step down at a knob's maximum. Cost is reported as computation.
    pub fn estimate(&self, config: &Configuration) -> GradientEstimate {
        let specs = self.specs();
        let mut acc = Vec::with_capacity(self.knobs.len());
        let mut gpu = Vec::with_capacity(self.knobs.len());
        for ((k, s), &i) in self.knobs.iter().zip(&specs).zip(config.indices()) {
            let (lo, hi) = if i < s.max_index() { (i, i + 1) } else { (i - 1, i) };
            let step = s.step();
            acc.push((k.accuracy(normalize(s, hi)) - k.accuracy(normalize(s, lo))).abs() / step);
            gpu.push(k.cost);
        }
        GradientEstimate {
            acc_grad: acc,
            output_grad: Vec::new(),
            res_grad_bw: vec![0.0; self.knobs.len()],
            res_grad_gpu: gpu,
            backprops_used: 0,
            extra_inferences_used: 0,
        }
    }

    pub fn all_configs(&self) -> Vec<Configuration> {
        let mut out = vec![Vec::new()];
        for k in &self.knobs {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    (0..k.values).map(move |v| {
                        let mut c = prefix.clone();
                        c.push(v);
                        c
                    })
                })
                .collect();
        }
        out.into_iter().map(Configuration).collect()
    }

    /// Exhaustive optimum; ties go to the lower cost.
    pub fn optimum(&self, lambda: f64) -> (Configuration, f64) {
        let mut best: Option<(Configuration, f64, f64)> = None;
        for c in self.all_configs() {
            let o = self.objective(&c, lambda);
            let cost = self.cost(&c);
            let better = match &best {
                None => true,
                Some((_, bo, bc)) => o > bo + 1e-12 || ((o - bo).abs() <= 1e-12 && cost < *bc),
            };
            if better {
                best = Some((c, o, cost));
            }
        }
        let (c, o, _) = best.expect("non-empty space");
        (c, o)
    }

    /// Lowest objective among configurations at most one step from the
    /// optimum on every knob; reaching it counts as "within one step".
    pub fn one_step_floor(&self, lambda: f64) -> f64 {
        let (opt, _) = self.optimum(lambda);
        self.all_configs()
            .into_iter()
            .filter(|c| c.indices().iter().zip(opt.indices()).all(|(a, b)| a.abs_diff(*b) <= 1))
            .map(|c| self.objective(&c, lambda))
            .fold(f64::INFINITY, f64::min)
    }
}

/// A sequence of surfaces, each active for a number of intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceScene {
    pub name: String,
    pub phases: Vec<(usize, SeparableSurface)>,
}

impl SurfaceScene {
    pub fn intervals(&self) -> usize {
        self.phases.iter().map(|(n, _)| n).sum()
    }

    /// First interval of every phase, starting with 1.
    pub fn phase_starts(&self) -> Vec<usize> {
        let mut t = 1;
        self.phases
            .iter()
            .map(|(n, _)| {
                let s = t;
                t += n;
                s
            })
            .collect()
    }

    pub fn surface_at(&self, t: usize) -> &SeparableSurface {
        let mut end = 0;
        for (n, s) in &self.phases {
            end += n;
            if t <= end {
                return s;
            }
        }
        &self.phases.last().expect("non-empty").1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceStep {
    pub t: usize,
    pub config: Configuration,
    pub objective: f64,
    pub optimum: f64,
    pub near_optimal: bool,
}

/// Runs the controller from the most expensive configuration.
pub fn run_surface(scene: &SurfaceScene, params: ControllerParams) -> Vec<SurfaceStep> {
    let first = &scene.phases[0].1;
    let specs = first.specs();
    let start = Configuration(specs.iter().map(|s| s.max_index()).collect());
    let mut state = ControllerState::new(&specs, start, params);
    let weights = ResourceWeights { bandwidth: 0.0, gpu: 1.0 };
    let mut out = Vec::with_capacity(scene.intervals());
    for t in 1..=scene.intervals() {
        let surface = scene.surface_at(t);
        let config = state.config().clone();
        let objective = surface.objective(&config, params.lambda);
        let (_, optimum) = surface.optimum(params.lambda);
        let floor = surface.one_step_floor(params.lambda);
        out.push(SurfaceStep {
            t,
            config: config.clone(),
            objective,
            optimum,
            near_optimal: objective >= floor - 1e-12,
        });
        state.step(&specs, &surface.estimate(&config), &weights);
    }
    out
}

/// Intervals from each phase start until the controller is first within one
/// step of the optimum; `None` when it never gets there within the phase.
pub fn settling_times(scene: &SurfaceScene, steps: &[SurfaceStep]) -> Vec<Option<usize>> {
    let starts = scene.phase_starts();
    starts
        .iter()
        .enumerate()
        .map(|(p, &s)| {
            let end = starts.get(p + 1).copied().unwrap_or(usize::MAX);
            steps.iter().filter(|st| st.t >= s && st.t < end).find(|st| st.near_optimal).map(|st| st.t - s)
        })
        .collect()
}

fn random_surface(rng: &mut ChaCha8Rng, knobs: usize) -> SeparableSurface {
    SeparableSurface {
        knobs: (0..knobs)
            .map(|_| SurfaceKnob {
                values: rng.random_range(3..=5),
                gain: rng.random_range(0.3..1.0),
                rate: rng.random_range(1.0..4.0),
                cost: rng.random_range(0.1..0.6),
            })
            .collect(),
    }
}

/// Seeded scenes: one stationary and two with phase changes that move the
/// optimum up and down.
pub fn suite(seed: u64) -> Vec<SurfaceScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stationary = random_surface(&mut rng, 3);
    let calm = SeparableSurface {
        knobs: vec![
            SurfaceKnob { values: 4, gain: 0.3, rate: 3.0, cost: 0.5 },
            SurfaceKnob { values: 2, gain: 0.6, rate: 2.0, cost: 0.3 },
            SurfaceKnob { values: 4, gain: 0.4, rate: 2.5, cost: 0.2 },
        ],
    };
    let busy = SeparableSurface {
        knobs: vec![
            SurfaceKnob { values: 4, gain: 1.0, rate: 1.5, cost: 0.5 },
            SurfaceKnob { values: 2, gain: 0.6, rate: 2.0, cost: 0.3 },
            SurfaceKnob { values: 4, gain: 0.4, rate: 2.5, cost: 0.2 },
        ],
    };
    let a = random_surface(&mut rng, 4);
    let mut b = a.clone();
    for k in &mut b.knobs {
        k.cost = rng.random_range(0.1..0.6);
    }
    vec![
        SurfaceScene {
            name: "stationary".into(),
            phases: vec![(20, stationary)],
        },
        SurfaceScene {
            name: "calm-busy-calm".into(),
            phases: vec![(12, calm.clone()), (12, busy), (12, calm)],
        },
        SurfaceScene {
            name: "repriced".into(),
            phases: vec![(15, a), (15, b)],
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knob_curve_endpoints() {
        let k = SurfaceKnob {
            values: 3,
            gain: 0.7,
            rate: 2.0,
            cost: 0.1,
        };
        assert_eq!(k.accuracy(0.0), 0.0);
        assert!((k.accuracy(1.0) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn optimum_by_hand() {
        // 4 values at 0, 1/3, 2/3, 1 with gain 1, rate 3, cost 0.8
        let s = SeparableSurface {
            knobs: vec![SurfaceKnob {
                values: 4,
                gain: 1.0,
                rate: 3.0,
                cost: 0.8,
            }],
        };
        let by_hand: Vec<f64> = (0..4)
            .map(|i| {
                let x = i as f64 / 3.0;
                (1.0 - (-3.0 * x).exp()) / (1.0 - (-3.0f64).exp()) - 0.8 * x
            })
            .collect();
        let best = (0..4).max_by(|&a, &b| by_hand[a].total_cmp(&by_hand[b])).unwrap();
        let (c, o) = s.optimum(1.0);
        assert_eq!(c, Configuration(vec![best]));
        assert!((o - by_hand[best]).abs() < 1e-12);
    }

    #[test]
    fn estimate_uses_step_down_at_top() {
        let s = SeparableSurface {
            knobs: vec![SurfaceKnob {
                values: 2,
                gain: 0.5,
                rate: 1.0,
                cost: 0.2,
            }],
        };
        let e = s.estimate(&Configuration(vec![1]));
        assert!((e.acc_grad[0] - 0.5).abs() < 1e-12);
        assert_eq!(e.res_grad_gpu, vec![0.2]);
    }

    #[test]
    fn suite_settles_within_five_intervals() {
        for scene in suite(11) {
            let steps = run_surface(&scene, ControllerParams::default());
            for (p, lag) in settling_times(&scene, &steps).into_iter().enumerate() {
                assert!(lag.is_some_and(|l| l <= 5), "{} phase {p}: {lag:?}", scene.name);
            }
        }
    }
}
