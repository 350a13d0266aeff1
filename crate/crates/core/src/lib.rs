//! Quick lists: playlist embeddings learned with two contrastive sequence
//! encoders, and next-playlist recommendation by nearest-neighbor lookup.
//!
//! The pipeline is split into stages that mirror the command-line tool:
//!
//! 1. [`data`]: sessionize listening histories into (current, future) pairs,
//!    build the track vocabulary, split users, or synthesize a corpus.
//! 2. [`track2vec`]: skip-gram pretraining of track vectors.
//! 3. [`encoder`] + [`training`]: the two-tower network and its pairwise
//!    ranking objective, built on the kernels in [`autodiff`].
//! 4. [`recommender`]: exact nearest-neighbor retrieval of future playlists.
//! 5. [`evaluation`]: F1 overlap, familiarity, baselines and lesion analysis.

pub mod autodiff;
pub mod data;
pub mod encoder;
mod error;
pub mod evaluation;
pub mod recommender;
pub(crate) mod rng;
pub mod track2vec;
pub mod training;

pub use error::{Error, Result};
