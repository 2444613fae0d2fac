//! Steganographic-domain feature lifting for detecting forged stego images.
//!
//! The crate provides a small `f64` tensor type with a reverse-mode tape,
//! Haar wavelets, learned low-pass filtering (LFAD), differential attention
//! with a wavelet term (SFDA), distribution alignment losses (SDA), low-rank
//! weight splitting (LoD), a wavelet-band hider, the detector, its staged
//! trainer and evaluation metrics.

pub mod autodiff;
pub mod detector;
pub mod error;
pub mod gradcheck;
pub mod hider;
pub mod lfad;
pub mod lod;
pub mod metrics;
pub mod params;
pub mod sda;
pub mod sfda;
pub mod tensor;
pub mod trainer;
pub mod wavelet;

pub use autodiff::{Gradients, Tape, Var};
pub use detector::{DetectorConfig, DetectorParams, HeadCount, Variant};
pub use error::{Error, Result};
pub use hider::{Hider, HiderConfig, ImageBatch, Role};
pub use lfad::{FilterBank, FilterMode};
pub use lod::SplitWeight;
pub use metrics::BinaryMetrics;
pub use params::{Param, ParamSet};
pub use sda::{AlignmentConfig, AttentionMetric, FeatureMetric, SdaPreset};
pub use sfda::{AttentionMap, DecoderParams, DiffAttnConfig, DiffAttnParams};
pub use tensor::Tensor;
pub use trainer::{Model, PairSet, TrainConfig, TrainOutcome};
pub use wavelet::{Band, SubBands};
