//! Synthetic scenes, the filtering/inference episode loop, adaptation
//! policies and trace output.

pub mod episode;
pub mod scenario;
pub mod scene;
pub mod trace;

use thiserror::Error;

pub use episode::{run_episode, EpisodeConfig, PolicySpec, ProfileSubset};
pub use scenario::Scenario;
pub use scene::{BackgroundMotion, Phase, Scene, SceneSpec};
pub use trace::{IntervalRecord, Trace, TraceFormat, TraceMeta, TRACE_SCHEMA};

use crate::controller::ControllerError;
use crate::estimator::EstimatorError;
use crate::knobs::KnobError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Invalid(String),
    #[error("trace: {0}")]
    Trace(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Knob(#[from] KnobError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}
