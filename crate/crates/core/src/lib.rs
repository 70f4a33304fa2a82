//! Meta-learned tracker initialization and online adaptation.
//!
//! The crate covers a small reverse-mode autodiff engine with second-order
//! support, a correlation-filter tracker head and a patch classifier head,
//! the meta-training loop that learns their initial parameters together with
//! per-parameter update rates, the online tracking loop, data ingestion and
//! evaluation metrics.

pub mod crest;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod meta;
pub mod model;
pub mod optim;
pub mod sdnet;
pub mod tensor;
pub mod tracker;

pub use crest::{CrestConfig, CrestModel, CrestParams, LossVariant, ResponseMap};
pub use data::{load_checkpoint, load_sequence, save_checkpoint, MetaDataset, Sequence};
pub use error::{Error, Result};
pub use eval::{
    emit_report, evaluate, precision_curve, success_curve, vot_accuracy_robustness, Curve, Report, VotScore,
};
pub use features::{FeatureConfig, FeatureExtractor, LayerSpec};
pub use geometry::{center_error, iou, BoundingBox};
pub use image::GrayImage;
pub use meta::{MetaConfig, MetaLearnable, MetaState, ModelSpec};
pub use model::{AdaptiveModel, Episode};
pub use optim::{meta_sgd_step, sgd_step, AdamConfig, AdamState, AlphaMode, AlphaSet};
pub use sdnet::{SdnetConfig, SdnetModel};
pub use tensor::{backward, bilinear_resample, conv2d, elementwise, Elementwise, Padding, Tensor};
pub use tracker::{InitParams, OnlineHead, Protocol, Strategy, TrackResult, Tracker, TrackerConfig};
