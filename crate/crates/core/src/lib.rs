//! IoU-balanced classification and localization losses for single-stage
//! detectors, together with the tooling needed to study them: exact
//! gradients under the stop-gradient rule, Bounded-IoU gradient-norm
//! curves, a seeded synthetic detection task with a linear detector, and
//! COCO-style evaluation.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod simulator;

pub use error::{Error, Result};
pub use evaluation::{ApTable, Detection, EvalImage, GroundTruth};
pub use geometry::{BBox, BoundAxis, BoxDelta};
pub use losses::{Label, LocWeightMode, LossConfig, NegativeExample, PositiveExample};
