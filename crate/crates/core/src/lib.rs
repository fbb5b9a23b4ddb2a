//! Edge-guided anomaly synthesis and localization.
//!
//! One generator architecture (shared encoder, texture decoder, heatmap
//! decoder and a parameter-free fusion) is trained in three stages: a boot
//! generator that learns to paint a reference image onto a target edge map,
//! a flare generator that learns heatmaps for edited regions, and a blaze
//! detector that localizes anomalies with the same network.

pub mod augment;
pub mod cli;
pub mod config;
pub mod edgeops;
pub mod error;
pub mod evalmetrics;
pub mod fsutil;
pub mod losses;
pub mod manifest;
pub mod netarch;
pub mod raster;
pub mod trainpipe;

pub use error::{Error, Result};
pub use raster::{EdgeMap, Heatmap, ImageTensor, Raster, RegionMask};
