//! Synthetic SDR/HDR training sets built from the formation model.

use serde::{Deserialize, Serialize};

use super::synth::{counter_unit, synth_raw_with, RawGamut, RawScene, SynthOptions};
use super::{form, FormationConfig, REC2020_LUMA};
use crate::color::{apply_matrix, apply_oetf, hable_tonemap, quantize, ColorError, ColorImage};
use crate::data_io::ImagePair;
use crate::filter::blur_reflect;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyntheticTask {
    /// Target equals the SDR input.
    Identity,
    /// Fixed tone curves, colors inside Rec.709: one global per-pixel mapping.
    Global,
    /// SDR white point follows each scene's 99.9th-percentile luminance and
    /// out-of-709 patches are present, so the mapping changes per image.
    Adaptive,
    /// `Global` plus a local contrast boost applied to the HDR rendition only.
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub task: SyntheticTask,
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub local: LocalContrast,
}

impl SyntheticSpec {
    pub fn new(task: SyntheticTask, count: usize, width: usize, height: usize, seed: u64) -> Self {
        Self {
            task,
            count,
            width,
            height,
            seed,
            local: LocalContrast::default(),
        }
    }
}

/// Detail boost in log-luminance around a Gaussian-blurred base layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalContrast {
    pub strength: f64,
    pub sigma: f64,
}

impl Default for LocalContrast {
    fn default() -> Self {
        Self {
            strength: 0.6,
            sigma: 8.0,
        }
    }
}

/// Region-dependent contrast change on a linear image; the result is clipped to [0,1].
pub fn local_contrast(img: &ColorImage, lc: &LocalContrast) -> ColorImage {
    let (w, h) = (img.width(), img.height());
    let n = img.pixel_count();
    let eps = 1e-6;
    let log_l: Vec<f64> = (0..n)
        .map(|i| {
            let l: f64 = (0..3).map(|c| REC2020_LUMA[c] * img.plane(c)[i] as f64).sum();
            (l + eps).ln()
        })
        .collect();
    let base = blur_reflect(&log_l, w, h, lc.sigma);
    let mut data = img.data().to_vec();
    for i in 0..n {
        let gain = (lc.strength * (log_l[i] - base[i])).exp();
        for c in 0..3 {
            let v = data[c * n + i] as f64 * gain;
            data[c * n + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    img.with_data(data)
}

/// Formation with a local contrast stage inserted after the tone curve.
pub fn form_with_local(raw: &RawScene, cfg: &FormationConfig, lc: &LocalContrast) -> Result<ColorImage, ColorError> {
    let toned = local_contrast(&hable_tonemap(&raw.image, &cfg.tone)?, lc);
    let mapped = apply_matrix(&toned, &cfg.gamut)?;
    let encoded = apply_oetf(&mapped, cfg.transfer)?;
    quantize(&encoded, cfg.quant)
}

/// Builds `spec.count` pixel-aligned pairs. Scene `i` uses a seed derived from
/// `(spec.seed, i)`, so any prefix of a larger set is identical to a smaller set.
pub fn synthetic_pairs(spec: &SyntheticSpec) -> Result<Vec<ImagePair>, ColorError> {
    let sdr = FormationConfig::sdr();
    let hdr = FormationConfig::hdr();
    (0..spec.count)
        .map(|i| {
            let seed = spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            match spec.task {
                SyntheticTask::Identity | SyntheticTask::Global | SyntheticTask::Local => {
                    let opts = SynthOptions {
                        gamut: RawGamut::Rec709,
                        saturated_patches: false,
                        ..Default::default()
                    };
                    let raw = synth_raw_with(seed, spec.width, spec.height, sdr.tone.white, &opts)?;
                    let s = form(&raw, &sdr)?;
                    let t = match spec.task {
                        SyntheticTask::Identity => s.clone(),
                        SyntheticTask::Local => form_with_local(&raw, &hdr, &spec.local)?,
                        _ => form(&raw, &hdr)?,
                    };
                    Ok(ImagePair::new(s, t))
                }
                SyntheticTask::Adaptive => {
                    let dr = 2f64.powf(1.0 + 4.0 * counter_unit(seed, 77, 0));
                    let opts = SynthOptions {
                        gamut: RawGamut::Rec2020,
                        saturated_patches: true,
                        ..Default::default()
                    };
                    let raw = synth_raw_with(seed, spec.width, spec.height, dr, &opts)?;
                    let s = form(&raw, &sdr.adapted_to(&raw, 0.999))?;
                    Ok(ImagePair::new(s, form(&raw, &hdr)?))
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::{ColorSpace, Domain};

    #[test]
    fn identity_pairs_match() {
        let p = synthetic_pairs(&SyntheticSpec::new(SyntheticTask::Identity, 2, 24, 16, 1)).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].sdr.data(), p[0].hdr.data());
    }

    #[test]
    fn prefix_stability() {
        let a = synthetic_pairs(&SyntheticSpec::new(SyntheticTask::Adaptive, 3, 16, 16, 9)).unwrap();
        let b = synthetic_pairs(&SyntheticSpec::new(SyntheticTask::Adaptive, 2, 16, 16, 9)).unwrap();
        assert_eq!(a[1].hdr.data(), b[1].hdr.data());
        assert_eq!(a[0].sdr.space, ColorSpace::Rec709);
        assert_eq!(a[0].hdr.space, ColorSpace::Rec2020);
    }

    #[test]
    fn local_contrast_keeps_flat_regions() {
        let img = ColorImage::from_fn(16, 16, ColorSpace::Rec2020, Domain::Linear, |_, _| [0.2, 0.3, 0.1]);
        let out = local_contrast(&img, &LocalContrast::default());
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn local_contrast_is_region_dependent() {
        // same input color, different neighbourhoods -> different outputs
        let img = ColorImage::from_fn(32, 8, ColorSpace::Rec2020, Domain::Linear, |x, _| {
            if x == 8 || x == 24 {
                [0.1; 3]
            } else if x < 16 {
                [0.02; 3]
            } else {
                [0.4; 3]
            }
        });
        let out = local_contrast(&img, &LocalContrast::default());
        assert!((out.pixel(8, 4)[0] - out.pixel(24, 4)[0]).abs() > 1e-3);
    }
}
