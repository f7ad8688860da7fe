//! Deterministic synthetic scene radiance.
//!
//! Every random number is a pure function of `(seed, stream, index)`, so a
//! scene can be generated in any pixel order or in parallel and still come out
//! bit-identical.

use serde::{Deserialize, Serialize};

use super::WORKING_SPACE;
use crate::color::{gamut_matrix, ColorError, ColorImage, ColorSpace, Domain};

/// Linear scene radiance in the Rec.2020 working space; all values finite and >= 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScene {
    pub image: ColorImage,
    pub seed: u64,
}

/// Which primaries the scene colors are drawn inside.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RawGamut {
    /// Colors inside Rec.709, so the SDR pipeline never clips chroma.
    Rec709,
    /// Colors anywhere inside Rec.2020.
    Rec2020,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub gamut: RawGamut,
    /// Adds fully saturated Rec.2020 primary patches that fall outside Rec.709.
    pub saturated_patches: bool,
    /// Power applied to the normalized luminance field; > 1 skews toward shadows.
    pub shadow_power: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            gamut: RawGamut::Rec2020,
            saturated_patches: false,
            shadow_power: 2.2,
        }
    }
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform value in [0,1) keyed by `(seed, stream, index)`.
#[inline]
pub fn counter_unit(seed: u64, stream: u64, index: u64) -> f64 {
    let k = splitmix(splitmix(seed ^ splitmix(stream)) ^ index);
    (k >> 11) as f64 / (1u64 << 53) as f64
}

struct Octave {
    cell: f64,
    amp: f64,
}

const LUMA_OCTAVES: [Octave; 5] = [
    Octave { cell: 96.0, amp: 1.0 },
    Octave { cell: 48.0, amp: 0.6 },
    Octave { cell: 24.0, amp: 0.36 },
    Octave { cell: 12.0, amp: 0.2 },
    Octave { cell: 6.0, amp: 0.1 },
];

const CHROMA_OCTAVES: [Octave; 2] = [Octave { cell: 64.0, amp: 1.0 }, Octave { cell: 20.0, amp: 0.5 }];

/// Lattice noise smoothed with a Gaussian over the 4x4 nearest nodes.
fn smooth_noise(seed: u64, stream: u64, x: f64, y: f64, cell: f64) -> f64 {
    let gx = x / cell;
    let gy = y / cell;
    let ix = gx.floor() as i64;
    let iy = gy.floor() as i64;
    let sigma2 = 2.0 * 0.55 * 0.55;
    let mut wx = [0.0; 4];
    let mut wy = [0.0; 4];
    for k in 0..4 {
        let dx = gx - (ix - 1 + k as i64) as f64;
        let dy = gy - (iy - 1 + k as i64) as f64;
        wx[k] = (-dx * dx / sigma2).exp();
        wy[k] = (-dy * dy / sigma2).exp();
    }
    let mut acc = 0.0;
    let mut norm = 0.0;
    for (j, wyj) in wy.iter().enumerate() {
        let ny = (iy - 1 + j as i64) as u64;
        for (i, wxi) in wx.iter().enumerate() {
            let nx = (ix - 1 + i as i64) as u64;
            let key = nx.wrapping_mul(0x1F1F_1F1F) ^ ny.wrapping_mul(0x9E37_79B9);
            let v = 2.0 * counter_unit(seed, stream, key) - 1.0;
            let w = wxi * wyj;
            acc += w * v;
            norm += w;
        }
    }
    acc / norm
}

fn field(seed: u64, stream: u64, x: f64, y: f64, octaves: &[Octave]) -> f64 {
    let total: f64 = octaves.iter().map(|o| o.amp).sum();
    let s: f64 = octaves
        .iter()
        .enumerate()
        .map(|(k, o)| o.amp * smooth_noise(seed, stream * 16 + k as u64, x, y, o.cell))
        .sum();
    s / total
}

/// Synthetic scene with default options (full Rec.2020 gamut, no patches).
pub fn synth_raw(seed: u64, width: usize, height: usize, dynamic_range: f64) -> Result<RawScene, ColorError> {
    synth_raw_with(seed, width, height, dynamic_range, &SynthOptions::default())
}

/// Smooth multi-octave scene scaled into `[0, dynamic_range]`.
pub fn synth_raw_with(
    seed: u64,
    width: usize,
    height: usize,
    dynamic_range: f64,
    opts: &SynthOptions,
) -> Result<RawScene, ColorError> {
    if width == 0 || height == 0 {
        return Err(ColorError::Shape("scene dimensions must be non-zero".into()));
    }
    if !(dynamic_range >= 1.0) || !dynamic_range.is_finite() {
        return Err(ColorError::InvalidParam(format!(
            "dynamic range must be >= 1, got {dynamic_range}"
        )));
    }
    let to_2020 = gamut_matrix(ColorSpace::Rec709, ColorSpace::Rec2020);
    let patches = if opts.saturated_patches {
        (0..3u64)
            .map(|p| {
                let pw = (width / 6).max(1);
                let ph = (height / 6).max(1);
                let x0 = (counter_unit(seed, 900 + p, 0) * (width - pw + 1) as f64) as usize;
                let y0 = (counter_unit(seed, 900 + p, 1) * (height - ph + 1) as f64) as usize;
                let level = dynamic_range * (0.3 + 0.6 * counter_unit(seed, 900 + p, 2));
                let mut rgb = [0.0f32; 3];
                rgb[p as usize] = level as f32;
                (x0, y0, pw, ph, rgb)
            })
            .collect::<Vec<_>>()
    } else {
        Vec::new()
    };

    let image = ColorImage::from_fn(width, height, WORKING_SPACE, Domain::Linear, |x, y| {
        if let Some(p) = patches
            .iter()
            .find(|(x0, y0, pw, ph, _)| x >= *x0 && x < x0 + pw && y >= *y0 && y < y0 + ph)
        {
            return p.4;
        }
        let (fx, fy) = (x as f64, y as f64);
        let s = field(seed, 1, fx, fy, &LUMA_OCTAVES);
        let u = 0.5 + 0.5 * (2.2 * s).tanh();
        let lum = dynamic_range * u.powf(opts.shadow_power);
        let mut chroma = [0.0; 3];
        for (c, ch) in chroma.iter_mut().enumerate() {
            let v = field(seed, 2 + c as u64, fx, fy, &CHROMA_OCTAVES);
            *ch = 0.3 + 0.7 * (0.5 + 0.5 * (2.5 * v).tanh());
        }
        let peak = chroma[0].max(chroma[1]).max(chroma[2]);
        let rgb = chroma.map(|c| lum * c / peak);
        let rgb = match opts.gamut {
            RawGamut::Rec2020 => rgb,
            RawGamut::Rec709 => to_2020.apply(rgb).map(|v| v.clamp(0.0, dynamic_range)),
        };
        rgb.map(|v| v as f32)
    });
    Ok(RawScene { image, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = synth_raw(42, 40, 30, 16.0).unwrap();
        let b = synth_raw(42, 40, 30, 16.0).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        let c = synth_raw(43, 40, 30, 16.0).unwrap();
        assert_ne!(a.image.data(), c.image.data());
    }

    #[test]
    fn unit_range_caps_at_one() {
        let s = synth_raw_with(
            5,
            64,
            64,
            1.0,
            &SynthOptions {
                saturated_patches: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(s.image.max_value() <= 1.0);
        assert!(s.image.min_value() >= 0.0);
    }

    #[test]
    fn histogram_is_rich() {
        let s = synth_raw(9, 256, 256, 12.0).unwrap();
        let distinct: std::collections::HashSet<u32> = s.image.plane(1).iter().map(|v| v.to_bits()).collect();
        assert!(distinct.len() >= 100, "{}", distinct.len());
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(synth_raw(1, 0, 5, 2.0).is_err());
        assert!(synth_raw(1, 5, 5, 0.5).is_err());
    }

    #[test]
    fn crop_of_scene_matches_generation_order() {
        // generating a larger scene and cropping equals the same pixels of the full scene
        let big = synth_raw(7, 32, 32, 8.0).unwrap();
        let small = synth_raw(7, 16, 16, 8.0).unwrap();
        assert_eq!(big.image.crop(0, 0, 16, 16).unwrap().data(), small.image.data());
    }

    #[test]
    fn rec709_scenes_stay_in_709_gamut() {
        let s = synth_raw_with(
            3,
            48,
            48,
            10.0,
            &SynthOptions {
                gamut: RawGamut::Rec709,
                ..Default::default()
            },
        )
        .unwrap();
        let back = gamut_matrix(ColorSpace::Rec2020, ColorSpace::Rec709);
        for i in 0..s.image.pixel_count() {
            let p = [0, 1, 2].map(|c| s.image.plane(c)[i] as f64);
            for v in back.apply(p) {
                assert!(v > -1e-5, "{v}");
            }
        }
    }
}
