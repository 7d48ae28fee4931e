//! Noise-tolerant domain adaptation on synthetic vector data.
//!
//! The pieces, bottom up:
//!
//! - [`diffcore`]: dense matrices, paired forward/backward ops, and the
//!   finite-difference gradient oracle everything else is verified against.
//! - [`model`]: the MLP feature extractor, prototype classifier, and the
//!   entropy domain discriminator that shares the classifier's parameters.
//! - [`losses`]: training objectives with hand-derived analytic gradients.
//! - [`noisemodel`]: two-component Gaussian mixture over distances to
//!   prototypes; turns clean posteriors into per-sample training weights.
//! - [`data`]: synthetic cross-domain datasets, corruption protocols, and
//!   CSV persistence.
//! - [`trainer`]: warm-up plus adversarial adaptation with per-epoch noise
//!   removal, SGD with momentum and weight decay.
//! - [`metrics`], [`sweep`], [`gradcheck`]: evaluation, experiment
//!   orchestration, and the gradient verification suite behind the CLI.

pub mod data;
pub mod diffcore;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod noisemodel;
pub mod sweep;
pub mod trainer;

pub use diffcore::{GradCheckReport, Matrix};
pub use error::{Error, Result};
pub use model::{FeatureExtractor, ModelState, PrototypeSet};
pub use trainer::TrainConfig;
