//! Dual-branch encoder–decoder segmentation for retinal OCT B-scans.
//!
//! The network pairs a U-Net style spatial encoder with a spectral encoder
//! built from fast Fourier convolution (FFC) blocks. Features from both
//! branches are fused before the bottleneck of a spatial decoder that
//! receives skip connections from the spatial encoder only.
//!
//! Every layer in this crate carries its own hand-written backward pass; the
//! [`audit`] module checks them against central finite differences.

pub mod audit;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod report;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::FeatureMap;

/// Reported class columns, in table order. Class id `i + 1` maps to `CLASS_NAMES[i]`.
pub const CLASS_NAMES: [&str; 8] = [
    "ILM", "NFL-IPL", "INL", "OPL", "ONL-ISM", "ISE", "OS-RPE", "Fluid",
];

/// Background plus the eight annotated structures.
pub const NUM_CLASSES: usize = 9;

/// Class id of intraretinal fluid.
pub const FLUID_CLASS: u8 = 8;
