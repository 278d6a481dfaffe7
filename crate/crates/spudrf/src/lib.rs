//! Self-paced deep regression forests for imbalanced regression.
//!
//! A regression forest routes each input *softly* through a set of binary
//! trees: an MLP backbone maps the raw features to a vector of split
//! activations, every split node applies a sigmoid to one backbone output,
//! and each leaf holds a Gaussian over the target. The forest density is the
//! uniform mixture of the per-tree leaf mixtures, trained by alternating
//! gradient ascent on the backbone with closed-form EM-style leaf updates.
//!
//! Training is *self-paced*: each pace scores every sample by
//! `log-likelihood + gamma * predictive entropy`, keeps the best-scoring
//! fraction (growing per pace until everything is in), and optionally assigns
//! fractional weights to a soft band near the admission threshold. The
//! entropy term pulls underrepresented, high-uncertainty samples into early
//! paces instead of deferring them to the end; `gamma` decays per pace and is
//! zero at the last one. A curriculum step can duplicate the highest-entropy
//! samples so rare targets carry more weight.
//!
//! The `spudrf` binary exposes dataset generation, training, evaluation, and
//! a three-arm ablation over the training modes; see [`cli`].

pub mod backbone;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod forest;
pub mod leaf_update;
pub mod metrics;
pub mod rng;
pub mod self_paced;
pub mod trainer;

pub use error::{Error, Result};
