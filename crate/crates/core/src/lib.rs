//! Self-supervised monocular depth with teacher/student self-training.

pub mod camgeom;
pub mod checkpoint;
pub mod dataset;
pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod gradsuite;
pub mod image;
pub mod losses;
pub mod nets;
pub mod rng;
pub mod synthscene;
pub mod tensor;
pub mod trainer;
pub mod translate;

pub use camgeom::{Intrinsics, Pose};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use image::{DepthMap, Image, Mask};
pub use synthscene::{Condition, SampleTriplet};
pub use tensor::Tensor;
