//! Opto-electronic transfer functions and their inverses.
//!
//! The PQ curve follows the HDR10 constants. The raw curve evaluates to
//! `c1^m2` (about 7.3e-7) at zero; it is shifted and rescaled by that offset
//! so that `pq_oetf(0) == 0` and `pq_oetf(1) == 1` hold exactly.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::ColorError;

pub const SDR_GAMMA: f64 = 2.2;

pub const PQ_M1: f64 = 0.1593017578125;
pub const PQ_M2: f64 = 78.84375;
pub const PQ_C1: f64 = 0.8359375;
pub const PQ_C2: f64 = 18.8515625;
pub const PQ_C3: f64 = 18.6875;

/// Absolute luminance represented by PQ code 1.0.
pub const PQ_PEAK_NITS: f64 = 10_000.0;

static CLAMP_WARNINGS: AtomicU64 = AtomicU64::new(0);

/// Number of out-of-range transfer inputs clamped since process start.
pub fn clamp_warnings() -> u64 {
    CLAMP_WARNINGS.load(Ordering::Relaxed)
}

pub(crate) fn record_clamps(n: u64) {
    if n > 0 {
        CLAMP_WARNINGS.fetch_add(n, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TransferFn {
    /// Pure power law; encoding uses `x^(1/exponent)`.
    Gamma(f64),
    Pq,
    Linear,
}

impl TransferFn {
    pub const SDR: TransferFn = TransferFn::Gamma(SDR_GAMMA);

    /// Linear light to code value. Inputs outside [0,1] are clamped and counted.
    pub fn oetf(self, x: f64) -> Result<f64, ColorError> {
        let (x, clamped) = clamp_unit(x)?;
        if clamped {
            record_clamps(1);
        }
        Ok(self.oetf_unit(x))
    }

    /// Code value to linear light. Inputs outside [0,1] are clamped and counted.
    pub fn eotf(self, y: f64) -> Result<f64, ColorError> {
        let (y, clamped) = clamp_unit(y)?;
        if clamped {
            record_clamps(1);
        }
        Ok(self.eotf_unit(y))
    }

    /// Unchecked encode for values already known to be in [0,1].
    #[inline]
    pub(crate) fn oetf_unit(self, x: f64) -> f64 {
        match self {
            TransferFn::Gamma(g) => x.powf(1.0 / g),
            TransferFn::Pq => pq_encode(x),
            TransferFn::Linear => x,
        }
    }

    #[inline]
    pub(crate) fn eotf_unit(self, y: f64) -> f64 {
        match self {
            TransferFn::Gamma(g) => y.powf(g),
            TransferFn::Pq => pq_decode(y),
            TransferFn::Linear => y,
        }
    }
}

/// Returns the clamped value and whether clamping happened; NaN is an error.
#[inline]
pub(crate) fn clamp_unit(x: f64) -> Result<(f64, bool), ColorError> {
    if x.is_nan() {
        return Err(ColorError::NaN);
    }
    if x < 0.0 {
        Ok((0.0, true))
    } else if x > 1.0 {
        Ok((1.0, true))
    } else {
        Ok((x, false))
    }
}

fn pq_offset() -> f64 {
    PQ_C1.powf(PQ_M2)
}

#[inline]
fn pq_encode(x: f64) -> f64 {
    let xp = x.powf(PQ_M1);
    let raw = ((PQ_C1 + PQ_C2 * xp) / (1.0 + PQ_C3 * xp)).powf(PQ_M2);
    let k = pq_offset();
    (raw - k) / (1.0 - k)
}

#[inline]
fn pq_decode(y: f64) -> f64 {
    let k = pq_offset();
    let raw = y * (1.0 - k) + k;
    let p = raw.powf(1.0 / PQ_M2);
    let num = (p - PQ_C1).max(0.0);
    let den = PQ_C2 - PQ_C3 * p;
    (num / den).powf(1.0 / PQ_M1)
}

pub fn gamma_oetf(x: f64) -> Result<f64, ColorError> {
    TransferFn::SDR.oetf(x)
}

pub fn gamma_eotf(y: f64) -> Result<f64, ColorError> {
    TransferFn::SDR.eotf(y)
}

pub fn pq_oetf(x: f64) -> Result<f64, ColorError> {
    TransferFn::Pq.oetf(x)
}

pub fn pq_eotf(y: f64) -> Result<f64, ColorError> {
    TransferFn::Pq.eotf(y)
}
