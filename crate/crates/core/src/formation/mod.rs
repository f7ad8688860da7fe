//! SDRTV and HDRTV formation pipelines.
//!
//! Both standards are produced from the same linear scene by four stages:
//! tone curve, primary conversion, transfer function and quantization. The
//! SDR pipeline clips highlights and out-of-gamut colors, which is the
//! information an up-conversion model has to hallucinate back.

mod dataset;
mod synth;

pub use dataset::{local_contrast, synthetic_pairs, LocalContrast, SyntheticSpec, SyntheticTask};
pub use synth::{counter_unit, synth_raw, synth_raw_with, RawGamut, RawScene, SynthOptions};

use serde::{Deserialize, Serialize};

use crate::color::{
    apply_eotf, apply_matrix, apply_oetf, gamut_matrix, hable_tonemap, quantize, ColorError, ColorImage, ColorSpace,
    Domain, GamutMatrix, QuantSpec, ToneCurveParams, TransferFn,
};

/// Working space of [`RawScene`]s.
pub const WORKING_SPACE: ColorSpace = ColorSpace::Rec2020;

/// Rec.2020 luma weights.
pub const REC2020_LUMA: [f64; 3] = [0.2627, 0.6780, 0.0593];
pub const REC709_LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormationConfig {
    pub tone: ToneCurveParams,
    pub gamut: GamutMatrix,
    pub transfer: TransferFn,
    pub quant: QuantSpec,
}

impl FormationConfig {
    /// Hable curve for a 100 cd/m2 display, Rec.709 primaries, gamma 2.2, 8 bits.
    ///
    /// Exposure 0.25 keeps the shoulder gentle enough that highlights below
    /// the white point stay distinguishable after 8-bit quantization.
    pub fn sdr() -> Self {
        Self {
            tone: ToneCurveParams {
                white: 11.2,
                exposure: 0.25,
                peak_nits: 100.0,
                ..ToneCurveParams::default()
            },
            gamut: gamut_matrix(WORKING_SPACE, ColorSpace::Rec709),
            transfer: TransferFn::SDR,
            quant: QuantSpec::new(8).expect("8 bits is supported"),
        }
    }

    /// Hable curve spanning the full 10 000 cd/m2 PQ range, Rec.2020, PQ, 10 bits.
    ///
    /// The white point sits 100x above the SDR one and the exposure places a
    /// scene value of 1.0 near 170 cd/m2, so SDR white lands near 1 700 cd/m2.
    pub fn hdr() -> Self {
        Self::hdr_with_bits(10).expect("10 bits is supported")
    }

    pub fn hdr_with_bits(bits: u32) -> Result<Self, ColorError> {
        Ok(Self {
            tone: ToneCurveParams {
                white: 1120.0,
                exposure: 0.055,
                peak_nits: 10_000.0,
                ..ToneCurveParams::default()
            },
            gamut: GamutMatrix::identity(WORKING_SPACE),
            transfer: TransferFn::Pq,
            quant: QuantSpec::new(bits)?,
        })
    }

    /// Copy with the tone white point set to the `quantile` luminance of `raw`.
    pub fn adapted_to(&self, raw: &RawScene, quantile: f64) -> Self {
        let mut cfg = *self;
        let w = luminance_quantile(&raw.image, quantile);
        if w > 0.0 {
            cfg.tone.white = w;
        }
        cfg
    }

    pub fn output_space(&self) -> ColorSpace {
        self.gamut.dst
    }
}

/// `quantile` of Rec.2020 luminance over all pixels (nearest rank).
pub fn luminance_quantile(img: &ColorImage, quantile: f64) -> f64 {
    let n = img.pixel_count();
    if n == 0 {
        return 0.0;
    }
    let mut lum: Vec<f64> = (0..n)
        .map(|i| (0..3).map(|c| REC2020_LUMA[c] * img.plane(c)[i] as f64).sum::<f64>())
        .collect();
    lum.sort_by(|a, b| a.total_cmp(b));
    let idx = ((quantile.clamp(0.0, 1.0) * (n - 1) as f64).round() as usize).min(n - 1);
    lum[idx]
}

/// `quantize ∘ oetf ∘ matrix ∘ tone` applied to a raw scene.
pub fn form(raw: &RawScene, cfg: &FormationConfig) -> Result<ColorImage, ColorError> {
    let toned = hable_tonemap(&raw.image, &cfg.tone)?;
    let mapped = apply_matrix(&toned, &cfg.gamut)?;
    let encoded = apply_oetf(&mapped, cfg.transfer)?;
    quantize(&encoded, cfg.quant)
}

/// Per-pixel analytic inverse of the SDR pipeline followed by the HDR
/// pipeline: decode, undo the gamut matrix and the SDR tone curve, then form
/// the HDR rendition. Exact up to SDR quantization for scenes whose colors
/// survive the SDR gamut and white clip.
pub fn analytic_sdr_to_hdr(
    sdr: &ColorImage,
    sdr_cfg: &FormationConfig,
    hdr_cfg: &FormationConfig,
) -> Result<ColorImage, ColorError> {
    let linear = apply_eotf(sdr)?;
    let toned = apply_matrix(&linear, &sdr_cfg.gamut.inverse())?;
    let scene = toned.map_pixels(|p| p.map(|v| sdr_cfg.tone.invert((v as f64).clamp(0.0, 1.0)) as f32));
    let hdr_toned = hable_tonemap(&scene, &hdr_cfg.tone)?;
    let mapped = apply_matrix(&hdr_toned, &hdr_cfg.gamut)?;
    quantize(&apply_oetf(&mapped, hdr_cfg.transfer)?, hdr_cfg.quant)
}

/// SDR and HDR renditions of the same scene.
pub fn make_pairs(
    raw: &RawScene,
    sdr_cfg: &FormationConfig,
    hdr_cfg: &FormationConfig,
) -> Result<(ColorImage, ColorImage), ColorError> {
    Ok((form(raw, sdr_cfg)?, form(raw, hdr_cfg)?))
}

/// Scale from 100 cd/m2-relative linear light to the PQ axis.
pub const SDR_TO_PQ_SCALE: f64 = 100.0 / 10_000.0;

/// LDR-to-HDR style conversion: linearize, widen primaries, place SDR white
/// at 100 cd/m2 on the PQ axis, encode and quantize to 10 bits.
pub fn ldr2hdr_baseline(sdr: &ColorImage) -> Result<ColorImage, ColorError> {
    if sdr.space != ColorSpace::Rec709 {
        return Err(ColorError::SpaceMismatch {
            expected: ColorSpace::Rec709,
            found: sdr.space,
        });
    }
    if !matches!(sdr.domain, Domain::Encoded(TransferFn::Gamma(_))) {
        return Err(ColorError::Domain("baseline expects gamma-encoded SDR"));
    }
    let linear = apply_eotf(sdr)?;
    let wide = apply_matrix(&linear, &gamut_matrix(ColorSpace::Rec709, ColorSpace::Rec2020))?;
    let scaled = wide.map_pixels(|p| p.map(|v| (v as f64 * SDR_TO_PQ_SCALE) as f32));
    let encoded = apply_oetf(&scaled, TransferFn::Pq)?;
    quantize(&encoded, QuantSpec::new(10)?)
}
