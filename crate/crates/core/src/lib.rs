//! Testbench for adversarial model manipulation of saliency-map explanations.
//!
//! Small convolutional classifiers are fine-tuned so that their Grad-CAM,
//! LRP or gradient saliency maps become uninformative or are swapped between
//! classes, while accuracy stays put. The crate contains the autodiff engine
//! that makes heatmaps trainable, the models, interpreters, fooling
//! objectives, evaluation metrics and dataset loaders.

// `!(x > 0.0)` is how NaN gets rejected alongside bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod model;
pub mod data;
pub mod interpreters;
pub mod fooling;
pub mod metrics;
