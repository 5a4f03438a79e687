//! A seeded, desk-scale detection task: random scenes, a grid of anchors,
//! IoU-threshold matching, and linear heads trained with plain SGD.

pub mod anchors;
pub mod experiment;
pub mod model;
pub mod scene;
pub mod train;

pub use anchors::{match_anchors, AnchorConfig, AnchorSet, Assignment, MatchResult};
pub use experiment::{compare, run_experiment, ComparisonReport, ExperimentReport};
pub use model::{forward, prepare_sample, FeatureConfig, ForwardOutput, SceneSample, ToyModel};
pub use scene::{generate_scene, Scene, SceneConfig, SceneObject};
pub use train::{train_step, EvalConfig, TrainConfig, TrainState};
