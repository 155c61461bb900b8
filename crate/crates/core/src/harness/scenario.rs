//! Declarative scenario files (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::episode::{EpisodeConfig, PolicySpec};
use super::{HarnessError, Scene, SceneSpec};
use crate::controller::{ControllerParams, ResourceWeights};
use crate::detector::{DetectorModel, DetectorSpec};
use crate::estimator::{EstimatorPolicy, Pipeline};
use crate::knobs::{Configuration, KnobSpace, KnobSpec};

/// Shares of the objective taken by each resource at the most expensive
/// configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub bandwidth_share: f64,
    pub gpu_share: f64,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec {
            bandwidth_share: 0.05,
            gpu_share: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSpec {
    pub intervals: usize,
    pub match_radius: usize,
    /// Per-interval GPU budget as a multiple of the native frame count;
    /// absent means unlimited.
    pub gpu_budget: Option<f64>,
    /// Value indices of the first interval; the most expensive
    /// configuration when absent.
    pub start: Option<Vec<usize>>,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            intervals: 60,
            match_radius: 1,
            gpu_budget: Some(1.5),
            start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSpec {
    /// Mean cosine similarity below which the check fails.
    pub threshold: f64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        GradcheckSpec {
            threshold: 0.8,
        }
    }
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec::OneAdapt
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub scene: SceneSpec,
    #[serde(default)]
    pub detector: DetectorSpec,
    pub knobs: Vec<KnobSpec>,
    #[serde(default)]
    pub controller: ControllerParams,
    #[serde(default)]
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub estimator: EstimatorPolicy,
    #[serde(default)]
    pub episode: EpisodeSpec,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub gradcheck: GradcheckSpec,
}

/// The runnable objects a scenario describes.
#[derive(Debug, Clone)]
pub struct Built {
    pub model: DetectorModel,
    pub space: KnobSpace,
    pub scene: Scene,
}

impl Built {
    pub fn pipeline(&self, match_radius: usize) -> Pipeline<'_> {
        Pipeline {
            model: &self.model,
            space: &self.space,
            match_radius,
        }
    }
}

impl Scenario {
    pub fn parse(text: &str, origin: &str) -> Result<Self, HarnessError> {
        let s: Scenario = toml::from_str(text).map_err(|e| HarnessError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Checks every section against its module's constraints without
    /// running anything.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Invalid(m));
        self.scene.validate().map_err(|e| HarnessError::Invalid(format!("scene: {e}")))?;
        let d = &self.detector;
        if d.kinds == 0 {
            return bad("detector.kinds must be at least 1".into());
        }
        if !(d.threshold > 0.0 && d.threshold < 1.0) {
            return bad("detector.threshold must lie in (0, 1)".into());
        }
        if !(d.sharpness > 0.0) {
            return bad("detector.sharpness must be positive".into());
        }
        let c = &self.controller;
        if !(c.alpha > 0.0 && c.alpha.is_finite()) {
            return bad("controller.alpha must be positive".into());
        }
        if !(c.lambda >= 0.0 && c.lambda.is_finite()) {
            return bad("controller.lambda must be non-negative".into());
        }
        let o = &self.objective;
        if !(o.bandwidth_share >= 0.0 && o.gpu_share >= 0.0) {
            return bad("objective shares must be non-negative".into());
        }
        let block = self.estimator.mcu_block;
        if block == 0 || self.scene.height % block != 0 || self.scene.width % block != 0 {
            return bad(format!(
                "estimator.mcu_block {block} must divide the {}x{} frame",
                self.scene.height, self.scene.width
            ));
        }
        if self.episode.intervals == 0 {
            return bad("episode.intervals must be positive".into());
        }
        if let Some(b) = self.episode.gpu_budget {
            if !(b > 0.0) {
                return bad("episode.gpu_budget must be positive".into());
            }
        }
        let space = self.space()?;
        if let Some(start) = &self.episode.start {
            space.validate(&Configuration(start.clone()))?;
        }
        self.policy.validate(&space)?;
        if !(0.0..=1.0).contains(&self.gradcheck.threshold) {
            return bad("gradcheck.threshold must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn space(&self) -> Result<KnobSpace, HarnessError> {
        Ok(KnobSpace::new(
            self.knobs.clone(),
            self.scene.height,
            self.scene.width,
            self.scene.frames_per_interval,
        )?)
    }

    pub fn build(&self) -> Result<Built, HarnessError> {
        self.validate()?;
        let model = DetectorModel::new(self.scene.height, self.scene.width, &self.detector);
        let space = self.space()?;
        let scene = Scene::new(self.scene.clone(), &model).map_err(HarnessError::Invalid)?;
        Ok(Built { model, space, scene })
    }

    pub fn weights(&self, space: &KnobSpace) -> ResourceWeights {
        ResourceWeights::relative(space, self.objective.bandwidth_share, self.objective.gpu_share)
    }

    pub fn episode_config(&self, space: &KnobSpace) -> EpisodeConfig {
        EpisodeConfig {
            intervals: self.episode.intervals,
            params: self.controller,
            estimator: self.estimator,
            weights: self.weights(space),
            gpu_budget: self.episode.gpu_budget.map(|b| b * self.scene.frames_per_interval as f64),
            start: self.episode.start.clone().map(Configuration),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::episode::ProfileSubset;

    const MINIMAL: &str = r#"
        [[knobs]]
        name = "fps"
        effect = "frame-rate"
        values = [1, 2, 5, 10]
    "#;

    #[test]
    fn minimal_file_takes_defaults() {
        let s = Scenario::parse(MINIMAL, "inline").unwrap();
        s.validate().unwrap();
        assert_eq!(s.policy, PolicySpec::OneAdapt);
        assert_eq!(s.controller, ControllerParams::default());
        assert_eq!(s.episode.intervals, 60);
    }

    #[test]
    fn policy_table() {
        let text = format!("{MINIMAL}\n[policy]\nname = \"profiling\"\nperiod = 4\nsubset = \"top-k\"\n");
        let s = Scenario::parse(&text, "inline").unwrap();
        assert_eq!(
            s.policy,
            PolicySpec::Profiling {
                period: 4,
                subset: ProfileSubset::TopK,
                top_k: 3
            }
        );
    }

    #[test]
    fn unknown_field_is_named() {
        let text = format!("{MINIMAL}\n[controller]\nalpah = 0.3\n");
        let err = Scenario::parse(&text, "inline").unwrap_err().to_string();
        assert!(err.contains("alpah"), "{err}");
    }

    #[test]
    fn block_must_divide_frame() {
        let text = format!("{MINIMAL}\n[estimator]\nmcu_block = 12\n");
        let s = Scenario::parse(&text, "inline").unwrap();
        assert!(s.validate().unwrap_err().to_string().contains("mcu_block"));
    }

    #[test]
    fn shipped_scenarios_validate() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
        let mut n = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "toml") {
                Scenario::load(&path).unwrap().validate().unwrap();
                n += 1;
            }
        }
        assert!(n >= 7);
    }
}
