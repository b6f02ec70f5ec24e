//! Forward-only inference engine for hybrid high-resolution / non-local
//! brain tumor segmentation networks.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only pure
//! computation: dense 3D kernels, the PMF and EMA modules, the single and
//! cascaded networks, the sliding-window inference pipeline, and the losses
//! and metrics. File formats and the command line live in `hnfnet-io`.
//!
//! ```
//! use hnfnet::network::{param_count, NetConfig};
//!
//! let params = param_count(&NetConfig::reference_single()).unwrap();
//! assert!(params > 12_000_000 && params < 22_000_000);
//! ```

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod augment;
pub mod ema;
pub mod error;
pub mod labels;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod pmf;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use labels::{LabelMap, Mask3, RegionMasks};
pub use network::{CascadeConfig, CascadeNet, NetConfig, RegionProbs, SingleNet};
pub use pipeline::{PipelineConfig, Study};
pub use tensor::{ConvSpec, Dims3, FlipAxes, Tensor4};
pub use weights::WeightStore;
