//! Full-reference quality metrics (PSNR, SSIM, ΔE ITP) and the color
//! transition test built on a synthetic color card.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::color::{ColorImage, ColorSpace, Domain, TransferFn};
use crate::filter::{filter_valid, gaussian_kernel};
use crate::formation::{REC2020_LUMA, REC709_LUMA};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("image shapes differ: {0}x{1} vs {2}x{3}")]
    Shape(usize, usize, usize, usize),
    #[error("image too small for SSIM: {0}x{1}, need at least 11x11")]
    TooSmall(usize, usize),
    #[error("images tagged differently: {0}")]
    Tags(String),
    #[error("ΔE ITP needs Rec.2020 PQ-encoded images, got {0:?} {1:?}")]
    NotPq(ColorSpace, Domain),
}

fn check_shape(a: &ColorImage, b: &ColorImage) -> Result<(), MetricError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(MetricError::Shape(a.width(), a.height(), b.width(), b.height()))
    }
}

/// `10 log10(peak² / MSE)` over all samples; `+inf` for identical images.
pub fn psnr(a: &ColorImage, b: &ColorImage, peak: f64) -> Result<f64, MetricError> {
    check_shape(a, b)?;
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    let mse = se / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Human-readable statement of how SSIM treats each image kind.
pub const SSIM_CONVENTION: &str =
    "SSIM on luma: PQ images decoded to display light (Rec.2020 weights), gamma images on encoded values (Rec.709 weights)";

fn luma(img: &ColorImage) -> Vec<f64> {
    let w = match img.space {
        ColorSpace::Rec2020 => REC2020_LUMA,
        ColorSpace::Rec709 => REC709_LUMA,
        ColorSpace::Xyz => [0.0, 1.0, 0.0],
    };
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let decode = matches!(img.domain, Domain::Encoded(TransferFn::Pq));
    (0..img.pixel_count())
        .map(|i| {
            let px = [r[i], g[i], b[i]].map(|v| {
                if decode {
                    TransferFn::Pq.eotf_unit(v as f64)
                } else {
                    v as f64
                }
            });
            w[0] * px[0] + w[1] * px[1] + w[2] * px[2]
        })
        .collect()
}

/// Mean single-scale SSIM (11x11 Gaussian window, sigma 1.5, valid region).
pub fn ssim(a: &ColorImage, b: &ColorImage) -> Result<f64, MetricError> {
    check_shape(a, b)?;
    if a.space != b.space || a.domain != b.domain {
        return Err(MetricError::Tags(format!(
            "{:?} {:?} vs {:?} {:?}",
            a.space, a.domain, b.space, b.domain
        )));
    }
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricError::TooSmall(w, h));
    }
    Ok(ssim_plane(&luma(a), &luma(b), w, h))
}

pub(crate) fn ssim_plane(x: &[f64], y: &[f64], w: usize, h: usize) -> f64 {
    let k = gaussian_kernel(SSIM_SIGMA, SSIM_WINDOW / 2);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, _, _) = filter_valid(x, w, h, &k);
    let (my, _, _) = filter_valid(y, w, h, &k);
    let (sxx, _, _) = filter_valid(&xx, w, h, &k);
    let (syy, _, _) = filter_valid(&yy, w, h, &k);
    let (sxy, _, _) = filter_valid(&xy, w, h, &k);
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    total / n as f64
}

const RGB2020_TO_LMS: [[f64; 3]; 3] = [
    [1688.0 / 4096.0, 2146.0 / 4096.0, 262.0 / 4096.0],
    [683.0 / 4096.0, 2951.0 / 4096.0, 462.0 / 4096.0],
    [99.0 / 4096.0, 309.0 / 4096.0, 3688.0 / 4096.0],
];

/// `(I, T, P)` of a PQ-encoded Rec.2020 pixel, with `T = Ct / 2`.
pub fn itp(rgb_pq: [f64; 3]) -> [f64; 3] {
    let lin = rgb_pq.map(|v| TransferFn::Pq.eotf_unit(v));
    let lms: Vec<f64> = RGB2020_TO_LMS
        .iter()
        .map(|row| TransferFn::Pq.oetf_unit(row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2]))
        .collect();
    let (l, m, s) = (lms[0], lms[1], lms[2]);
    let i = 0.5 * l + 0.5 * m;
    let ct = (6610.0 * l - 13613.0 * m + 7003.0 * s) / 4096.0;
    let cp = (17933.0 * l - 17390.0 * m - 543.0 * s) / 4096.0;
    [i, 0.5 * ct, cp]
}

fn check_pq(img: &ColorImage) -> Result<(), MetricError> {
    if img.space == ColorSpace::Rec2020 && img.domain == Domain::Encoded(TransferFn::Pq) {
        Ok(())
    } else {
        Err(MetricError::NotPq(img.space, img.domain))
    }
}

/// Per-pixel `720 sqrt(ΔI² + ΔT² + ΔP²)`.
pub fn delta_e_itp_map(a: &ColorImage, b: &ColorImage) -> Result<Vec<f64>, MetricError> {
    check_shape(a, b)?;
    check_pq(a)?;
    check_pq(b)?;
    let px = |img: &ColorImage, i: usize| [0, 1, 2].map(|c| img.plane(c)[i] as f64);
    Ok((0..a.pixel_count())
        .map(|i| {
            let (p, q) = (itp(px(a, i)), itp(px(b, i)));
            720.0 * ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
        })
        .collect())
}

/// Mean ΔE ITP over pixels.
pub fn delta_e_itp(a: &ColorImage, b: &ColorImage) -> Result<f64, MetricError> {
    let m = delta_e_itp_map(a, b)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Present when both images are Rec.2020 PQ.
    pub delta_e_itp: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

impl MetricReport {
    pub fn evaluate(
        &mut self,
        name: &str,
        pred: &ColorImage,
        reference: &ColorImage,
    ) -> Result<&MetricRow, MetricError> {
        let de = match (check_pq(pred), check_pq(reference)) {
            (Ok(()), Ok(())) => Some(delta_e_itp(pred, reference)?),
            _ => None,
        };
        self.rows.push(MetricRow {
            name: name.to_string(),
            psnr: psnr(pred, reference, 1.0)?,
            ssim: ssim(pred, reference)?,
            delta_e_itp: de,
        });
        Ok(self.rows.last().unwrap())
    }

    /// Mean of each column (PSNR averaged in dB; `inf` if any row is `inf`).
    pub fn aggregate(&self) -> MetricRow {
        let n = self.rows.len().max(1) as f64;
        let des: Vec<f64> = self.rows.iter().filter_map(|r| r.delta_e_itp).collect();
        MetricRow {
            name: "mean".into(),
            psnr: self.rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: self.rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            delta_e_itp: (!des.is_empty()).then(|| des.iter().sum::<f64>() / des.len() as f64),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# {SSIM_CONVENTION}\nname,psnr_db,ssim,delta_e_itp\n");
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate())) {
            let de = r.delta_e_itp.map(|v| format!("{v:.6}")).unwrap_or_default();
            s += &format!("{},{},{:.6},{}\n", r.name, fmt_db(r.psnr), r.ssim, de);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{SSIM_CONVENTION}\n{:<24} {:>10} {:>9} {:>12}\n",
            "image", "PSNR(dB)", "SSIM", "ΔE_ITP"
        );
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate())) {
            let de = r.delta_e_itp.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            s += &format!("{:<24} {:>10} {:>9.6} {:>12}\n", r.name, fmt_db(r.psnr), r.ssim, de);
        }
        s
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Synthetic SDR test chart: horizontal ramps on top, flat patches below.
#[derive(Debug, Clone)]
pub struct ColorCard {
    pub image: ColorImage,
    pub seed: u64,
    pub ramps: Vec<Rect>,
    pub patches: Vec<Rect>,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Builds a Rec.709 gamma-encoded card on the 8-bit grid. Requires
/// `width >= 32` and `height >= 32`.
pub fn make_color_card(seed: u64, width: usize, height: usize) -> ColorCard {
    let width = width.max(32);
    let height = height.max(32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hue0: f64 = rng.random();
    let ramp_h = height * 3 / 5;
    let bands = 4;
    let band_h = ramp_h / bands;
    let ramps: Vec<Rect> = (0..bands)
        .map(|b| Rect {
            x: 0,
            y: b * band_h,
            w: width,
            h: band_h,
        })
        .collect();
    let cols = 8;
    let rows = 2;
    let area_y = bands * band_h;
    let cell_w = width / cols;
    let cell_h = (height - area_y) / rows;
    let margin = (cell_w.min(cell_h) / 8).max(1);
    let mut patches = Vec::new();
    let mut patch_colors = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            patches.push(Rect {
                x: c * cell_w + margin,
                y: area_y + r * cell_h + margin,
                w: cell_w - 2 * margin,
                h: cell_h - 2 * margin,
            });
            patch_colors.push([0; 3].map(|_| rng.random_range(0.05..0.95)));
        }
    }
    let q = |v: f64| ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32;
    let img = ColorImage::from_fn(
        width,
        height,
        ColorSpace::Rec709,
        Domain::Encoded(TransferFn::SDR),
        |x, y| {
            let t = x as f64 / (width - 1) as f64;
            let rgb = if y < area_y {
                match y / band_h {
                    0 => hsv(hue0 + t, 1.0, 1.0),
                    1 => hsv(hue0 + t, 0.5, 0.75),
                    // blue-dominant band from near black to saturated blue
                    2 => [0.05 + 0.15 * t, 0.08 + 0.25 * t, 0.1 + 0.9 * t],
                    _ => [t, t, t],
                }
            } else {
                match patches
                    .iter()
                    .position(|p| x >= p.x && x < p.x + p.w && y >= p.y && y < p.y + p.h)
                {
                    Some(i) => patch_colors[i],
                    None => [0.5; 3],
                }
            };
            rgb.map(q)
        },
    );
    let mut image = img;
    image.bits = Some(8);
    ColorCard {
        image,
        seed,
        ramps,
        patches,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TransitionReport {
    /// Largest `max - min` of any channel inside any constant patch.
    pub max_patch_deviation: f64,
    pub patch_deviations: Vec<f64>,
    pub patches_with_deviation: usize,
    /// Largest `|x[i-1] - 2 x[i] + x[i+1]|` along the ramp rows.
    pub smoothness: f64,
}

/// Measures a processed card. `output` must have the card's dimensions.
pub fn transition_report(output: &ColorImage, card: &ColorCard) -> Result<TransitionReport, MetricError> {
    check_shape(output, &card.image)?;
    let w = output.width();
    let mut devs = Vec::with_capacity(card.patches.len());
    for p in &card.patches {
        let mut dev = 0.0f64;
        for c in 0..3 {
            let plane = output.plane(c);
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for y in p.y..p.y + p.h {
                for &v in &plane[y * w + p.x..y * w + p.x + p.w] {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            dev = dev.max((hi - lo) as f64);
        }
        devs.push(dev);
    }
    let mut smooth = 0.0f64;
    for r in &card.ramps {
        for c in 0..3 {
            let plane = output.plane(c);
            for y in r.y..r.y + r.h {
                let row = &plane[y * w + r.x..y * w + r.x + r.w];
                for i in 1..row.len().saturating_sub(1) {
                    let d = row[i - 1] as f64 - 2.0 * row[i] as f64 + row[i + 1] as f64;
                    smooth = smooth.max(d.abs());
                }
            }
        }
    }
    Ok(TransitionReport {
        max_patch_deviation: devs.iter().cloned().fold(0.0, f64::max),
        patches_with_deviation: devs.iter().filter(|&&d| d > 0.0).count(),
        patch_deviations: devs,
        smoothness: smooth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};

    fn img(w: usize, h: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> ColorImage {
        ColorImage::from_fn(w, h, ColorSpace::Rec709, Domain::Encoded(TransferFn::SDR), f)
    }

    fn hdr(w: usize, h: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> ColorImage {
        ColorImage::from_fn(w, h, ColorSpace::Rec2020, Domain::Encoded(TransferFn::Pq), f)
    }

    fn noise(seed: u64, w: usize, h: usize) -> ColorImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d: Vec<f32> = (0..3 * w * h).map(|_| rng.random()).collect();
        img(w, h, |_, _| [0.0; 3]).with_data(d)
    }

    #[test]
    fn psnr_cases() {
        let a = img(16, 12, |x, y| [0.5, (x as f32) / 32.0, (y as f32) / 32.0]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        for (e, db) in [(0.1f64, 20.0), (0.01, 40.0)] {
            // offsets are exact in f64 so the error is uniform to f32 rounding
            let b = a.map_pixels(|p| p.map(|v| (v as f64 + e) as f32));
            let got = psnr(&a, &b, 1.0).unwrap();
            assert!((got - db).abs() < 1e-4, "{got}");
        }
        let small = img(3, 3, |_, _| [0.0; 3]);
        assert!(matches!(psnr(&a, &small, 1.0), Err(MetricError::Shape(..))));
    }

    #[test]
    fn psnr_exact_on_representable_errors() {
        let a = img(8, 8, |_, _| [0.0; 3]);
        let b = img(8, 8, |_, _| [0.25; 3]);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0 * 4f64.log10()).abs() < 1e-12);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn ssim_cases() {
        let a = noise(1, 24, 20);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = a.map_pixels(|p| p.map(|v| 1.0 - v));
        assert!(ssim(&a, &neg).unwrap() < 0.5);
        let c = img(16, 16, |_, _| [0.25; 3]);
        let d = img(16, 16, |_, _| [0.75; 3]);
        let (x, y) = (0.25f64, 0.75f64);
        let c1 = 0.01f64 * 0.01;
        let closed = (2.0 * x * y + c1) / (x * x + y * y + c1);
        let got = ssim(&c, &d).unwrap();
        assert!((got - closed).abs() < 1e-6, "{got} vs {closed}");
        assert!(matches!(
            ssim(&img(10, 30, |_, _| [0.0; 3]), &img(10, 30, |_, _| [0.0; 3])),
            Err(MetricError::TooSmall(..))
        ));
    }

    #[test]
    fn ssim_flip_invariant() {
        let a = noise(2, 23, 17);
        let b = noise(3, 23, 17);
        let flip = |m: &ColorImage| {
            let w = m.width();
            ColorImage::from_fn(w, m.height(), m.space, m.domain, |x, y| m.pixel(w - 1 - x, y))
        };
        let s0 = ssim(&a, &b).unwrap();
        let s1 = ssim(&flip(&a), &flip(&b)).unwrap();
        assert!((s0 - s1).abs() < 1e-12);
    }

    #[test]
    fn ssim_decodes_pq() {
        let a = hdr(12, 12, |x, _| [x as f32 / 12.0; 3]);
        let b = hdr(12, 12, |x, _| [x as f32 / 12.0 + 0.01; 3]);
        let s = ssim(&a, &b).unwrap();
        assert!(s > 0.0 && s < 1.0);
        let mixed = img(12, 12, |_, _| [0.0; 3]);
        assert!(matches!(ssim(&a, &mixed), Err(MetricError::Tags(_))));
    }

    #[test]
    fn delta_e_hand_oracle() {
        let a = hdr(1, 1, |_, _| [0.5, 0.4, 0.3]);
        let b = hdr(1, 1, |_, _| [0.52, 0.38, 0.33]);
        let expected = 37.18345794068311;
        // f32 storage of the inputs limits agreement
        let got = delta_e_itp(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-4 * expected.max(1.0), "{got}");
        let p = itp([0.5, 0.4, 0.3]);
        let want = [0.4347756568477885, -0.05482688022557683, 0.150307835743725];
        for i in 0..3 {
            assert!((p[i] - want[i]).abs() < 1e-12);
        }
        assert_eq!(delta_e_itp(&a, &a).unwrap(), 0.0);
        assert_eq!(delta_e_itp(&a, &b).unwrap(), delta_e_itp(&b, &a).unwrap());
        let sdr = img(1, 1, |_, _| [0.5; 3]);
        assert!(matches!(delta_e_itp(&sdr, &sdr), Err(MetricError::NotPq(..))));
    }

    proptest! {
        #[test]
        fn delta_e_triangle(p in proptest::array::uniform9(0.0f32..1.0)) {
            let a = hdr(1, 1, |_, _| [p[0], p[1], p[2]]);
            let b = hdr(1, 1, |_, _| [p[3], p[4], p[5]]);
            let c = hdr(1, 1, |_, _| [p[6], p[7], p[8]]);
            let ab = delta_e_itp_map(&a, &b).unwrap()[0];
            let bc = delta_e_itp_map(&b, &c).unwrap()[0];
            let ac = delta_e_itp_map(&a, &c).unwrap()[0];
            prop_assert!(ac <= ab + bc + 1e-6);
        }

        #[test]
        fn psnr_monotone_in_noise(amp in 0.001f64..0.2) {
            let a = noise(5, 16, 16);
            let jitter = noise(6, 16, 16);
            let perturb = |s: f64| {
                let d = a.data().iter().zip(jitter.data()).map(|(&v, &j)| (v as f64 + s * (j as f64 - 0.5)) as f32).collect();
                a.with_data(d)
            };
            let p1 = psnr(&a, &perturb(amp), 1.0).unwrap();
            let p2 = psnr(&a, &perturb(amp * 1.5), 1.0).unwrap();
            prop_assert!(p2 < p1);
        }
    }

    #[test]
    fn color_card_properties() {
        let card = make_color_card(3, 256, 160);
        assert_eq!(card.image.width(), 256);
        assert_eq!(make_color_card(3, 256, 160).image, card.image);
        assert_ne!(make_color_card(4, 256, 160).image, card.image);
        let rep = transition_report(&card.image, &card).unwrap();
        assert_eq!(rep.max_patch_deviation, 0.0);
        assert_eq!(rep.patches_with_deviation, 0);
        assert_eq!(rep.patch_deviations.len(), 16);
        assert!(rep.smoothness > 0.0);
        // blue band really is blue-dominant
        let band = card.ramps[2];
        let p = card.image.pixel(band.w - 1, band.y + 1);
        assert!(p[2] > 2.0 * p[0] && p[2] > 2.0 * p[1]);
    }

    #[test]
    fn pixelwise_map_keeps_patches_flat() {
        let card = make_color_card(9, 200, 120);
        let out = card.image.map_pixels(|p| [p[0] * p[1], p[2].sqrt(), 1.0 - p[0]]);
        let rep = transition_report(&out, &card).unwrap();
        assert_eq!(rep.max_patch_deviation, 0.0);
        let noisy = noise(1, 200, 120);
        let rep = transition_report(&noisy, &card).unwrap();
        assert!(rep.max_patch_deviation > 0.0);
    }

    #[test]
    fn report_formats() {
        let a = hdr(16, 16, |x, y| [x as f32 / 16.0, y as f32 / 16.0, 0.3]);
        let mut r = MetricReport::default();
        r.evaluate("same", &a, &a).unwrap();
        let row = &r.rows[0];
        assert_eq!((row.psnr, row.ssim, row.delta_e_itp), (f64::INFINITY, 1.0, Some(0.0)));
        assert!(r.to_csv().contains("same,inf,1.000000,0.000000"));
        assert!(r.to_table().contains("inf"));
    }
}
