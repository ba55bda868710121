//! Speaker-verification back-end.
//!
//! The crate consumes fixed-dimension speaker embeddings and provides the
//! scoring and adaptation stages around them:
//!
//! * [`embedspace`]: embedding sets, file formats, whitening and cosine scoring
//! * [`plda`]: two-covariance PLDA training, LLR scoring and a generative sampler
//! * [`coral`]: CORAL and CORAL+ adaptation of PLDA covariances
//! * [`metrics`]: EER, minimum/actual detection cost, DET points
//! * [`calfuse`]: logistic-regression calibration (partitioned, with quality
//!   measures) and linear score fusion
//! * [`neurkern`]: circle loss and RepVGG structural re-parameterization
//! * [`codecsim`]: G.711 A-law companding and PCM transcoding
//! * [`synth`]: seeded synthetic domain-shift experiments built from the above

pub mod calfuse;
pub mod codecsim;
pub mod coral;
pub mod embedspace;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod neurkern;
pub mod plda;
pub mod synth;

pub use embedspace::{Embedding, EmbeddingSet};
pub use error::{Error, Result};
pub use metrics::{CostParams, Trial, TrialKey, TrialScores};
pub use plda::PldaModel;
