//! Tone mapping, gamut conversion, transfer functions and quantization.
//!
//! Every operation here is pixel-independent: output pixel `i` is a function
//! of input pixel `i` only.

mod gamut;
mod image;
mod quant;
mod tone;
mod transfer;

pub use gamut::{
    apply_matrix, determinant, gamut_matrix, invert, mul, mul_vec, rgb_to_xyz, GamutMatrix, Mat3, D65_WHITE, IDENTITY,
    REC2020_PRIMARIES, REC709_PRIMARIES,
};
pub use image::{ColorImage, ColorSpace, Domain};
pub use quant::{quantize, QuantSpec};
pub use tone::{hable_tonemap, ToneCurve, ToneCurveParams};
pub use transfer::{
    clamp_warnings, gamma_eotf, gamma_oetf, pq_eotf, pq_oetf, TransferFn, PQ_C1, PQ_C2, PQ_C3, PQ_M1, PQ_M2,
    PQ_PEAK_NITS, SDR_GAMMA,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ColorError {
    #[error("NaN input")]
    NaN,
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("sample {value} at index {index} is outside the valid range")]
    OutOfRange { index: usize, value: f64 },
    #[error("expected {expected:?} input, found {found:?}")]
    SpaceMismatch { expected: ColorSpace, found: ColorSpace },
    #[error("wrong domain: {0}")]
    Domain(&'static str),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// Encodes a linear image with `tf`, clamping to [0,1] and counting clamps.
pub fn apply_oetf(img: &ColorImage, tf: TransferFn) -> Result<ColorImage, ColorError> {
    if img.domain != Domain::Linear {
        return Err(ColorError::Domain("oetf needs linear input"));
    }
    let mut clamped = 0u64;
    let mut data = Vec::with_capacity(img.data().len());
    for &v in img.data() {
        let (x, c) = transfer::clamp_unit(v as f64)?;
        clamped += c as u64;
        data.push(tf.oetf_unit(x) as f32);
    }
    if clamped > 0 {
        log::warn!("oetf clamped {clamped} out-of-range samples");
        transfer::record_clamps(clamped);
    }
    let mut out = img.with_data(data);
    out.domain = Domain::Encoded(tf);
    Ok(out)
}

/// Decodes an encoded image back to linear light.
pub fn apply_eotf(img: &ColorImage) -> Result<ColorImage, ColorError> {
    let Domain::Encoded(tf) = img.domain else {
        return Err(ColorError::Domain("eotf needs encoded input"));
    };
    let mut clamped = 0u64;
    let mut data = Vec::with_capacity(img.data().len());
    for &v in img.data() {
        let (y, c) = transfer::clamp_unit(v as f64)?;
        clamped += c as u64;
        data.push(tf.eotf_unit(y) as f32);
    }
    transfer::record_clamps(clamped);
    let mut out = img.with_data(data);
    out.domain = Domain::Linear;
    out.bits = None;
    Ok(out)
}
