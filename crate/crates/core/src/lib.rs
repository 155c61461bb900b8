pub mod autodiff;
pub mod cli;
pub mod controller;
pub mod detector;
pub mod estimator;
pub mod harness;
pub mod knobs;
