//! Binary polyp segmentation with a U-Net decoder on a ResNet50 encoder.
//!
//! * [`model`]: the network, checkpoints and ImageNet weight import.
//! * [`data`]: dataset loading, splitting, augmentation, normalization and batching.
//! * [`train`]: one-cycle Adam training on binary cross-entropy.
//! * [`metrics`]: Jaccard, DSC, recall, precision, accuracy and F2.
//! * [`config`], [`report`] and [`cli`]: run configuration, plots and the `polypseg` command.
//!
//! Everything runs on the CPU through the small layer library in [`nn`].

pub mod cli;
pub mod config;
pub mod data;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod report;
pub mod train;
