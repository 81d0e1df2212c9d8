//! Residual quantization of feature vectors over a shared codebook.
//!
//! The pipeline is image → [`codec::PatchCodec::encode`] → feature map →
//! [`feature_map::quantize_feature_map`] → code stack map plus partial-sum
//! maps → [`codec::PatchCodec::decode`]. Codebooks learn through EMA
//! k-means updates with random restarts of unused codes
//! ([`stage1::train_stage1`]).

pub mod codebook;
pub mod codec;
mod error;
pub mod feature_map;
pub mod image;
mod io;
pub mod par;
pub mod rng;
pub mod rq;
pub mod stage1;
pub mod synthetic;

pub use codebook::{Codebook, UsageHistogram, LAPLACE_EPS};
pub use codec::{CodecConfig, CodecInit, CodecMode, PatchCodec};
pub use error::{Error, Result};
pub use feature_map::{commitment_loss, quantize_feature_map, CodeStackMap, FeatureMap, QuantizedMap, SamplingMode};
pub use image::Image;
pub use par::Execution;
pub use rq::{
    capacity_check, one_hot, rq_decode, rq_encode, rq_encode_stochastic, soft_label, CodebookStack, PerDepthCodebooks,
    Quantizer, RqResult, SoftLabel,
};
