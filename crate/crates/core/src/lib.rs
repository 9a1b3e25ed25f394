//! Desk-scale pipeline that interprets a caption visually: a K-branch
//! multi-stage text-conditioned GAN synthesizes K images per caption, a
//! max-pool fusion distills them into one feature vector, and a classifier
//! combines real-image, synthetic-image, and text features for labeling.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod optim;
pub mod params;
pub mod rng;
pub mod stackgman;
pub mod textenc;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
pub use params::Params;
