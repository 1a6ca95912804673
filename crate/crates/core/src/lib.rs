//! Chip-constrained encoder-decoder segmentation.
//!
//! The crate covers the full developer loop for small segmentation networks
//! that must run entirely on a low-power CNN accelerator: reference kernels
//! for the supported operators, the Large / Medium / Small model graphs with
//! a depth-to-space reformat and an integer-encoded mask head, a chip
//! constraint validator with an 8-bit execution mode, a host-to-chip
//! throughput model that can be calibrated from measured frame rates, and a
//! deterministic toy training harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chip;
pub mod codec;
pub mod color;
pub mod error;
pub mod io;
pub mod kernels;
pub mod link;
pub mod model;
pub mod quant;
pub mod tensor;
pub mod train;

pub use chip::{estimate_frame_macs, validate, ChipProfile, ValidationReport, ViolationCode};
pub use codec::{CodecConfig, HeadMode, LabelMap};
pub use color::{fold_colorspace, rgb_to_yuv, yuv_to_rgb, ColorMatrix};
pub use error::{Error, Result};
pub use link::{
    calibrate, frame_bytes, predict_fps, Calibration, CalibrationRow, ComputeFit, ComputeProfile,
    FittedProfiles, FrameCost, LinkProfile,
};
pub use model::{
    build, ForwardTrace, Head, InputFormat, MajorLayer, ModelConfig, ModelGraph, OpDesc, OpKind,
    Resample, SubLayer, Variant, WidthConfig,
};
pub use quant::{quantize, QuantizedModel};
pub use tensor::{ConvParams, Tensor};
