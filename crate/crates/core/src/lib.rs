//! Coarse-to-fine scoring head for action quality assessment.
//!
//! A clip feature sequence is fused into procedure features, parsed into
//! per-grade coarse and fine features, classified into a grade, and matched
//! against a fixed simplex ETF of sub-grade prototypes. The two soft
//! estimates are coupled into one score.

pub mod check;
pub mod config;
pub mod data;
pub mod error;
pub mod etf;
pub mod grading;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use etf::{build_etf, verify_etf, EtfMatrix};
pub use grading::{GradingScheme, ScoreNormalizer};
pub use losses::{FineTarget, LossParts, LossWeights};
pub use metrics::{fisher_z_average, srcc};
pub use model::{AlignMode, HeadParams, Model, ModelConfig, PredictionBundle};
pub use tensor::{Activation, RngState, RngStream, Tape, Tensor, Var};
