//! OCT fingerprint pipeline: layer segmentation with a dual-branch network,
//! one-class presentation attack detection on its latent codes, and
//! reconstruction of three subsurface fingerprints from the segmented
//! layers. A synthetic phantom generator supplies labelled volumes.
//!
//! The guide under `book/` walks through each stage; its code listings are
//! compiled and run as doctests of this crate.

pub mod config;
pub mod dataset;
pub mod error;
pub mod io;
pub mod metrics;
pub mod net;
pub mod pad;
pub mod reconstruct;
pub mod phantom;
pub mod resample;
pub mod train;
pub mod types;

pub use error::{Error, Result};

/// Chapters of the guide, compiled so their listings stay correct.
#[cfg(doctest)]
pub mod guide {
    #[doc = include_str!("../../../book/src/overview.md")]
    pub struct Overview;
    #[doc = include_str!("../../../book/src/phantoms.md")]
    pub struct Phantoms;
    #[doc = include_str!("../../../book/src/network.md")]
    pub struct Network;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/pad.md")]
    pub struct Pad;
    #[doc = include_str!("../../../book/src/reconstruction.md")]
    pub struct Reconstruction;
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub struct Metrics;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
