//! Few-shot segmentation with a dense cross-attention teacher and a
//! support-free distilled student.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod flops;
pub mod loss;
pub mod memory;
pub mod model;
pub mod optim;
pub mod params;
pub mod stats;
pub mod student;
pub mod synth;
pub mod teacher;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
