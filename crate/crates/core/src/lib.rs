//! Criminal case matching with judgment-pretrained legal factors.
//!
//! Stage 1 pre-trains a transformer extractor to predict article, charge and
//! term labels; its three factor layers yield one vector per legal factor.
//! Stage 2 splits those factors into exclusive and shared parts under an
//! adversarial discriminator and fuses per-factor relevance heads by their
//! prediction entropy.

pub mod autograd;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod lfdr;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod pretrain;
pub mod seed;
pub mod tensor;

pub use corpus::{Case, ClassCounts, GenSpec, Judgment, LjpExample, MatchExample, MatchRecord, Vocab};
pub use encoder::{Encoder, EncoderConfig};
pub use error::{Error, Result};
pub use fusion::{FusionMode, FusionResult};
pub use metrics::Metrics;
pub use params::ParamStore;
pub use tensor::Mat;
