//! Query-driven KV-cache channel pruning and the machinery around it.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every algorithmic piece:
//! dense kernels, channel scoring and selection, token eviction, low-bit
//! quantization, the segmented key/value cache, the segmented decode path,
//! analytic memory accounting and spectral analysis of attention matrices.
//! File formats, workload generation and the command line live in the
//! `kvtrim` crate.
#![cfg_attr(not(any(test, feature = "std")), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod analysis;
pub mod attention;
pub mod cache;
mod error;
pub mod evictor;
pub mod mask;
pub mod memory;
pub mod pruner;
pub mod quant;
pub mod tensor;

pub use cache::{CacheConfig, SegmentedCache, SegmentedKeyCache, ValueCache};
pub use error::{Error, Result};
pub use mask::ChannelMask;
pub use tensor::Matrix;
