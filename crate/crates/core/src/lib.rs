//! Weakly supervised temporal segmentation of frame-feature sequences.
//!
//! A frame scorer produces per-frame class log-posteriors. A transcript
//! constrained Viterbi decoder turns them into an anchor segmentation, a
//! layered segmentation graph is built around the anchor cuts, and the scorer
//! is trained on soft-minimum energies of valid and invalid graph paths.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar for the common cases.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// lattice recursions index several parallel arrays by vertex
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod data;
pub mod error;
pub mod hmm;
pub mod losses;
pub mod metrics;
pub mod oracle;
pub mod prefix;
pub mod render;
pub mod scalar;
pub mod scorer;
pub mod seggraph;
pub mod synth;
pub mod trainer;

pub use data::{
    validate_dataset, Dataset, FrameLogPosteriors, FrameSequence, LabelSet, Segmentation,
    Transcript, Video,
};
pub use error::{Error, Result};
pub use hmm::{ClassPrior, LengthModel, ViterbiResult};
pub use losses::{LossGradients, LossKind};
pub use scalar::Scalar;
pub use scorer::ScorerParams;
pub use seggraph::{EdgeEnergies, Lattice, PathAssignment, SegGraph};
pub use trainer::{ModelState, TrainConfig};

pub type DatasetF32 = Dataset<f32>;
pub type DatasetF64 = Dataset<f64>;
pub type FrameLogPosteriorsF32 = FrameLogPosteriors<f32>;
pub type FrameLogPosteriorsF64 = FrameLogPosteriors<f64>;
pub type SegGraphF32 = SegGraph<f32>;
pub type SegGraphF64 = SegGraph<f64>;
pub type EdgeEnergiesF64 = EdgeEnergies<f64>;
pub type LossGradientsF64 = LossGradients<f64>;
pub type ScorerParamsF32 = ScorerParams<f32>;
pub type ScorerParamsF64 = ScorerParams<f64>;
pub type ModelStateF32 = ModelState<f32>;
pub type ModelStateF64 = ModelState<f64>;
