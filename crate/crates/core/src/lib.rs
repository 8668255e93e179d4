//! Core engine for set-prediction temporal grounding on feature sequences.
//!
//! A video is a sequence of frame feature vectors and a query is a single
//! feature vector; the model predicts, in one parallel pass, a fixed-size set
//! of candidate time spans together with a soft correspondence between each
//! candidate and each query. Training matches predictions to ground-truth
//! spans with a Hungarian assignment and optimizes a combined correspondence
//! and localization loss.
//!
//! The crate is self-contained: interval geometry ([`span`]), optimal
//! assignment ([`assign`]), a small reverse-mode autodiff engine ([`tensor`]),
//! the transformer model ([`model`]), losses ([`loss`]), a synthetic corpus
//! generator ([`corpus`]), the training loop ([`train`]) and retrieval
//! metrics ([`metrics`]).

pub mod assign;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod span;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
