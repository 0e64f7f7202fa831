//! Probabilistic pixel representations for semi-supervised segmentation.
//!
//! Pixels are embedded as diagonal Gaussians and contrasted against
//! per-class prototypes with the mutual likelihood score. Prototypes are
//! accumulated across iterations as a streaming Bayesian posterior, and
//! extra negatives are drawn from those posteriors instead of a memory bank.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod negatives;
pub mod network;
pub mod objective;
pub mod prob_embed;
pub mod prototypes;
pub mod train;

pub use error::{PrclError, Result};
pub use negatives::{AnchorGroup, Candidate, MemoryBank, SampleSet, VirtualNegative, VnScale};
pub use objective::HyperParams;
pub use prob_embed::ProbRepr;
pub use prototypes::{GlobalPrototype, PrototypeBank, PrototypeStrategy};
pub use config::{NegativeStrategy, Representation, RunConfig, Strategy};
