//! Generative sequential recommendation over semantic IDs.
//!
//! Items are tokenized into short code tuples by a gated residual quantizer,
//! collisions are resolved by optimal transport, and a Transformer
//! encoder-decoder generates the next item's code tuple under a prefix trie.
//!
//! Numeric code is generic over [`semrec_tape::Scalar`]; the aliases below
//! fix the element type.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dedup;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod features;
pub mod pipeline;
pub mod quantizer;
pub mod recommender;
pub mod sid;
pub mod synth;
pub mod trie;

pub use error::{Error, Result};
pub use semrec_tape::{Scalar, Tensor};

pub type FeatureSet32 = features::FeatureSet<f32>;
pub type FeatureSet64 = features::FeatureSet<f64>;
pub type QuantizerModel32 = quantizer::QuantizerModel<f32>;
pub type QuantizerModel64 = quantizer::QuantizerModel<f64>;
pub type RecommenderModel32 = recommender::RecommenderModel<f32>;
pub type RecommenderModel64 = recommender::RecommenderModel<f64>;
pub type ItemContext32 = recommender::ItemContext<f32>;
pub type ItemContext64 = recommender::ItemContext<f64>;
