//! Learned pseudorange corrections trained through a differentiable
//! moving-horizon GNSS estimator.

pub mod bench;
pub mod diff;
pub mod edf;
pub mod estimate;
pub mod geo;
pub mod linalg;
pub mod model;
pub mod neural;
pub mod sim;
pub mod train;
