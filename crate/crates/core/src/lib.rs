//! SDRTV-to-HDRTV up-conversion toolkit.
//!
//! * [`color`] and [`formation`] model how SDR and HDR television content is
//!   produced from the same scene (tone curve, gamut matrix, transfer function,
//!   quantization) and generate synthetic training pairs.
//! * [`nn`] is a small reverse-mode differentiation core with exactly the
//!   layers the two mapping networks need.
//! * [`agcm`] is the adaptive global color mapping network (per-pixel base
//!   network modulated by a global condition vector); [`le`] is the local
//!   enhancement U-shaped network that refines its output.
//! * [`lut`] bakes any per-pixel mapping into a 3D LUT; [`metrics`] provides
//!   PSNR, SSIM and ΔE ITP plus a color transition test.

pub mod agcm;
pub mod checks;
pub mod color;
pub mod data_io;
pub(crate) mod filter;
pub mod formation;
pub mod le;
pub mod lut;
pub mod metrics;
pub mod nn;
pub mod train;
