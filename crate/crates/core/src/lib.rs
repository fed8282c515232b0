//! Desk-scale multi-task scene understanding with adversarial probes of
//! inter-task relationships.
//!
//! The crate covers the whole pipeline: a procedural scene generator with
//! ground truth for five tasks, a shared-encoder network with detection,
//! segmentation, instance-mask, depth and instance-depth outputs, its training
//! losses, three attack families (loss-grouped PGD, class-swap DAG and
//! category hiding) and the evaluation harness used to read task interactions
//! off the attacks.

pub mod attacks;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod maskcodec;
pub mod metrics;
pub mod model;
pub mod report;
pub mod runner;
pub mod scenegen;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use tasks::{Task, TaskSet};
