//! Moiré removal with a multi-level hypervision network.
//!
//! [`tensor`], [`kernels`] and [`graph`] form a small f64 tensor and
//! reverse-mode autograd engine. [`blocks`] and [`network`] build the model on
//! top of it, [`losses`] and [`metrics`] score it, [`data`] feeds it, and
//! [`harness`] trains, evaluates and ablates it. The guide in `book/` walks
//! through each part.

pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/blocks.md")]
    mod blocks {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
