//! Dark states, detection probabilities and mean detection times for a
//! quantum walker on a ring monitored stroboscopically by a local detector.

pub mod detection;
pub mod error;
pub mod model;
pub mod numerics;
pub mod output;
pub mod spectral;
pub mod stroboscopic;
pub mod sweep;
pub mod vectorized;

pub use error::{Error, Result};
