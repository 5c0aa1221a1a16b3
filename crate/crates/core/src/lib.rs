//! Component-based attention for trademark image retrieval.
//!
//! The pipeline suppresses text in trademark images so that global
//! descriptors concentrate on the figurative part: a U-Net text segmenter
//! feeds hard attention (text removal and cropping) and mask-based soft
//! attention, a class activation map trained on trademark types feeds a
//! second soft attention, and pooled backbone activations are turned into
//! whitened global descriptors ranked by cosine similarity.

pub mod dataset;
pub mod error;
pub mod features;
pub mod hard_attention;
pub mod imaging;
pub mod mask;
pub mod nn;
pub mod retrieval;
pub mod segmenter;
pub mod soft_attention;

pub use error::{Error, Result};
