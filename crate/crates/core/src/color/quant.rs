use serde::{Deserialize, Serialize};

use super::image::{ColorImage, Domain};
use super::ColorError;

/// Bit depth of a uniform code grid on [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    bits: u32,
}

impl QuantSpec {
    pub const SUPPORTED: [u32; 4] = [8, 10, 12, 16];

    pub fn new(bits: u32) -> Result<Self, ColorError> {
        if Self::SUPPORTED.contains(&bits) {
            Ok(Self { bits })
        } else {
            Err(ColorError::InvalidParam(format!("unsupported bit depth {bits}")))
        }
    }

    pub fn bits(self) -> u32 {
        self.bits
    }

    /// Largest code, `2^bits - 1`.
    pub fn max_code(self) -> f64 {
        ((1u64 << self.bits) - 1) as f64
    }

    #[inline]
    pub fn code(self, x: f64) -> u32 {
        (self.max_code() * x + 0.5).floor() as u32
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        let s = self.max_code();
        (s * x + 0.5).floor() / s
    }
}

/// Rounds encoded values to the nearest code of `q`.
pub fn quantize(img: &ColorImage, q: QuantSpec) -> Result<ColorImage, ColorError> {
    if img.domain == Domain::Linear {
        return Err(ColorError::Domain("quantization needs encoded input"));
    }
    let data = img.data().iter().map(|&v| q.apply(v as f64) as f32).collect();
    let mut out = img.with_data(data);
    out.bits = Some(q.bits());
    Ok(out)
}
