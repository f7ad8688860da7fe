//! Hable filmic tone curve.

use serde::{Deserialize, Serialize};

use super::image::{ColorImage, Domain};
use super::ColorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ToneCurve {
    Hable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToneCurveParams {
    pub curve: ToneCurve,
    /// Shoulder strength.
    pub a: f64,
    /// Linear strength.
    pub b: f64,
    /// Linear angle.
    pub c: f64,
    /// Toe strength.
    pub d: f64,
    /// Toe numerator.
    pub e: f64,
    /// Toe denominator.
    pub f: f64,
    /// Scene value that maps to display peak.
    pub white: f64,
    /// Multiplies the input before the curve; shapes how much of the shoulder is used.
    pub exposure: f64,
    /// Display peak the normalized output refers to, in cd/m2.
    pub peak_nits: f64,
}

impl Default for ToneCurveParams {
    fn default() -> Self {
        Self {
            curve: ToneCurve::Hable,
            a: 0.15,
            b: 0.50,
            c: 0.10,
            d: 0.20,
            e: 0.02,
            f: 0.30,
            white: 11.2,
            exposure: 1.0,
            peak_nits: 100.0,
        }
    }
}

impl ToneCurveParams {
    pub fn validate(&self) -> Result<(), ColorError> {
        if !(self.white > 0.0) || !self.white.is_finite() {
            return Err(ColorError::InvalidParam(format!(
                "white point must be > 0, got {}",
                self.white
            )));
        }
        if !(self.exposure > 0.0) || !self.exposure.is_finite() {
            return Err(ColorError::InvalidParam(format!(
                "exposure must be > 0, got {}",
                self.exposure
            )));
        }
        if self.f == 0.0 || self.d * self.f == 0.0 {
            return Err(ColorError::InvalidParam("toe denominator must be non-zero".into()));
        }
        Ok(())
    }

    #[inline]
    fn h(&self, x: f64) -> f64 {
        let (a, b, c, d, e, f) = (self.a, self.b, self.c, self.d, self.e, self.f);
        (x * (a * x + c * b) + d * e) / (x * (a * x + b) + d * f) - e / f
    }

    /// Curve value at `x`, normalized so `map(white) == 1`, clipped at 1.
    #[inline]
    pub fn map(&self, x: f64) -> f64 {
        let y = self.h(self.exposure * x) / self.h(self.exposure * self.white);
        y.min(1.0)
    }

    /// Smallest input whose curve value is `y`, found by bisection;
    /// `y >= 1` maps to `white`.
    pub fn invert(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        if y >= 1.0 {
            return self.white;
        }
        let (mut lo, mut hi) = (0.0, self.white);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.map(mid) < y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Applies the tone curve to every channel of a linear image.
pub fn hable_tonemap(img: &ColorImage, p: &ToneCurveParams) -> Result<ColorImage, ColorError> {
    p.validate()?;
    if img.domain != Domain::Linear {
        return Err(ColorError::Domain("tone mapping needs linear input"));
    }
    if let Some(i) = img.data().iter().position(|&v| v.is_nan() || v < 0.0) {
        return Err(ColorError::OutOfRange {
            index: i,
            value: img.data()[i] as f64,
        });
    }
    let data = img.data().iter().map(|&v| p.map(v as f64) as f32).collect();
    Ok(img.with_data(data))
}
