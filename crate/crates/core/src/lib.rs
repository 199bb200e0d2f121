//! Prototypical-part semantic segmentation.
//!
//! A small convolutional backbone produces a feature map; every feature
//! point is compared against learned class-bound prototype vectors, and a
//! linear layer turns those similarities into class logits. Training runs a
//! staged protocol (warmup, joint, projection, fine-tune, pruning, fine-tune)
//! with a Jeffrey-divergence diversity loss that pushes prototypes of the
//! same class onto different object parts.

pub mod config;
pub mod error;
pub mod explain;
pub mod numcore;
pub mod protoloss;
pub mod seeding;
pub mod segmodel;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
