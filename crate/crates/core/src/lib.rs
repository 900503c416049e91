pub mod density;
pub mod error;
pub mod forward;
pub mod io;
pub mod linalg;
pub mod mlp;
pub mod reverse;
pub mod rng;
pub mod scenarios;
pub mod scalar;
pub mod score;
pub mod systems;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Matrix = linalg::Matrix<f64>;
pub type SpdMatrix = linalg::SpdMatrix<f64>;
pub type Ensemble = density::ParticleEnsemble<f64>;
