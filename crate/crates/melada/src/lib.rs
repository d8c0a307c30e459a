//! MeLaDA: meta-learning augmented domain adaptation for subject-agnostic
//! EEG emotion recognition.
//!
//! The crate provides a reverse-mode autodiff tape with second-order
//! support, the differential-entropy feature pipeline, the dual-GRL
//! domain-shift controller, episodic meta-training, test-time
//! self-adaptation, a synthetic multi-domain benchmark, and a
//! leave-one-subject-out evaluation harness.

pub mod adaptation;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod rng;
pub mod selfcheck;
pub mod signal;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
