//! Caption curation and ensembling toolkit.
//!
//! The crate covers the model-independent half of a zero-shot captioning
//! pipeline: loading image-text records with precomputed embeddings, the
//! image-text contrastive loss, similarity bucketing and prompt templates,
//! exact top-k retrieval with caption cleaning, CIDEr-D scoring, and the two
//! caption ensembling tricks (similarity copy-paste and CIDEr consensus).

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bucketizer;
pub mod cider;
pub mod corpus;
pub mod ensembler;
pub mod error;
pub mod pipeline;
pub mod retriever;
pub mod simcore;
pub mod synth;
pub mod templater;

pub use error::{Error, Result};
