//! Primary conversion matrices built from chromaticity coordinates.

use serde::{Deserialize, Serialize};

use super::image::{ColorImage, ColorSpace, Domain};
use super::ColorError;

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub const D65_WHITE: (f64, f64) = (0.3127, 0.3290);
pub const REC709_PRIMARIES: [(f64, f64); 3] = [(0.64, 0.33), (0.30, 0.60), (0.15, 0.06)];
pub const REC2020_PRIMARIES: [(f64, f64); 3] = [(0.708, 0.292), (0.170, 0.797), (0.131, 0.046)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GamutMatrix {
    pub m: Mat3,
    pub src: ColorSpace,
    pub dst: ColorSpace,
}

impl GamutMatrix {
    pub fn identity(space: ColorSpace) -> Self {
        Self {
            m: IDENTITY,
            src: space,
            dst: space,
        }
    }

    #[inline]
    pub fn apply(&self, rgb: [f64; 3]) -> [f64; 3] {
        mul_vec(&self.m, rgb)
    }

    pub fn inverse(&self) -> Self {
        Self {
            m: invert(&self.m).expect("gamut matrices are non-singular"),
            src: self.dst,
            dst: self.src,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.m == IDENTITY
    }
}

/// RGB-to-XYZ matrix for the given primaries and white point (Y of white = 1).
pub fn rgb_to_xyz(primaries: [(f64, f64); 3], white: (f64, f64)) -> Mat3 {
    let xyz = |(x, y): (f64, f64)| [x / y, 1.0, (1.0 - x - y) / y];
    let cols = primaries.map(xyz);
    let p: Mat3 = [
        [cols[0][0], cols[1][0], cols[2][0]],
        [cols[0][1], cols[1][1], cols[2][1]],
        [cols[0][2], cols[1][2], cols[2][2]],
    ];
    let s = mul_vec(&invert(&p).expect("primaries are independent"), xyz(white));
    let mut m = p;
    for row in m.iter_mut() {
        for (v, si) in row.iter_mut().zip(s) {
            *v *= si;
        }
    }
    m
}

fn to_xyz(space: ColorSpace) -> Mat3 {
    match space {
        ColorSpace::Rec709 => rgb_to_xyz(REC709_PRIMARIES, D65_WHITE),
        ColorSpace::Rec2020 => rgb_to_xyz(REC2020_PRIMARIES, D65_WHITE),
        ColorSpace::Xyz => IDENTITY,
    }
}

/// Linear-light conversion matrix from `src` primaries to `dst` primaries via XYZ.
pub fn gamut_matrix(src: ColorSpace, dst: ColorSpace) -> GamutMatrix {
    if src == dst {
        return GamutMatrix::identity(src);
    }
    let from_xyz = invert(&to_xyz(dst)).expect("primaries are independent");
    GamutMatrix {
        m: mul(&from_xyz, &to_xyz(src)),
        src,
        dst,
    }
}

/// Per-pixel matrix multiply of a linear image.
pub fn apply_matrix(img: &ColorImage, m: &GamutMatrix) -> Result<ColorImage, ColorError> {
    if img.domain != Domain::Linear {
        return Err(ColorError::Domain("apply_matrix needs linear input"));
    }
    if img.space != m.src {
        return Err(ColorError::SpaceMismatch {
            expected: m.src,
            found: img.space,
        });
    }
    let mut out = if m.is_identity() {
        img.clone()
    } else {
        img.map_pixels(|p| {
            let o = m.apply([p[0] as f64, p[1] as f64, p[2] as f64]);
            [o[0] as f32, o[1] as f32, o[2] as f32]
        })
    };
    out.space = m.dst;
    Ok(out)
}

#[inline]
pub fn mul_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn determinant(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn invert(m: &Mat3) -> Option<Mat3> {
    let det = determinant(m);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
        [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
        [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
    ];
    Some(adj.map(|row| row.map(|v| v / det)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPACES: [ColorSpace; 3] = [ColorSpace::Rec709, ColorSpace::Rec2020, ColorSpace::Xyz];

    /// Independent route: solve the white-balance scales with Cramer's rule and
    /// compose src->XYZ->dst without going through `gamut_matrix`.
    fn cramer_rgb_to_xyz(prim: [(f64, f64); 3], white: (f64, f64)) -> Mat3 {
        let col = |(x, y): (f64, f64)| [x / y, 1.0, (1.0 - x - y) / y];
        let (r, g, b, w) = (col(prim[0]), col(prim[1]), col(prim[2]), col(white));
        let det3 = |a: [f64; 3], b: [f64; 3], c: [f64; 3]| {
            a[0] * (b[1] * c[2] - b[2] * c[1]) - b[0] * (a[1] * c[2] - a[2] * c[1]) + c[0] * (a[1] * b[2] - a[2] * b[1])
        };
        let d = det3(r, g, b);
        let sr = det3(w, g, b) / d;
        let sg = det3(r, w, b) / d;
        let sb = det3(r, g, w) / d;
        [
            [r[0] * sr, g[0] * sg, b[0] * sb],
            [r[1] * sr, g[1] * sg, b[1] * sb],
            [r[2] * sr, g[2] * sg, b[2] * sb],
        ]
    }

    #[test]
    fn same_space_is_identity() {
        for s in SPACES {
            assert!(gamut_matrix(s, s).is_identity());
        }
    }

    #[test]
    fn round_trips_within_1e9() {
        for a in SPACES {
            for b in SPACES {
                let p = mul(&gamut_matrix(b, a).m, &gamut_matrix(a, b).m);
                for i in 0..3 {
                    for j in 0..3 {
                        assert!((p[i][j] - IDENTITY[i][j]).abs() <= 1e-9, "{a:?}->{b:?}");
                    }
                }
                assert!(determinant(&gamut_matrix(a, b).m).abs() > 1e-6);
            }
        }
    }

    #[test]
    fn white_is_preserved() {
        for (a, b) in [
            (ColorSpace::Rec709, ColorSpace::Rec2020),
            (ColorSpace::Rec2020, ColorSpace::Rec709),
        ] {
            let w = gamut_matrix(a, b).apply([1.0, 1.0, 1.0]);
            for v in w {
                assert!((v - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn red_709_in_2020_matches_cramer_oracle() {
        let to709 = cramer_rgb_to_xyz(REC709_PRIMARIES, D65_WHITE);
        let to2020 = cramer_rgb_to_xyz(REC2020_PRIMARIES, D65_WHITE);
        let oracle = mul_vec(&invert(&to2020).unwrap(), mul_vec(&to709, [1.0, 0.0, 0.0]));
        let got = gamut_matrix(ColorSpace::Rec709, ColorSpace::Rec2020).apply([1.0, 0.0, 0.0]);
        for i in 0..3 {
            assert!((got[i] - oracle[i]).abs() < 1e-12);
        }
        // numpy.linalg.solve on the same primaries
        let frozen = [0.627_403_9, 0.069_097_29, 0.016_391_44];
        for i in 0..3 {
            assert!((got[i] - frozen[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn apply_matrix_checks_space_and_domain() {
        let img = ColorImage::new(2, 2, ColorSpace::Rec709, Domain::Linear);
        let m = gamut_matrix(ColorSpace::Rec2020, ColorSpace::Rec709);
        assert!(matches!(apply_matrix(&img, &m), Err(ColorError::SpaceMismatch { .. })));
        let enc = ColorImage::new(2, 2, ColorSpace::Rec2020, Domain::Encoded(crate::color::TransferFn::Pq));
        assert!(apply_matrix(&enc, &m).is_err());
    }

    #[test]
    fn apply_matrix_identity_and_zero() {
        let img = ColorImage::from_fn(3, 2, ColorSpace::Rec709, Domain::Linear, |x, y| {
            [x as f32 * 0.3, y as f32 * 0.7, 0.1]
        });
        let out = apply_matrix(&img, &GamutMatrix::identity(ColorSpace::Rec709)).unwrap();
        assert_eq!(out.data(), img.data());
        let zero = ColorImage::new(4, 4, ColorSpace::Rec709, Domain::Linear);
        let out = apply_matrix(&zero, &gamut_matrix(ColorSpace::Rec709, ColorSpace::Rec2020)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.space, ColorSpace::Rec2020);
    }

    #[test]
    fn one_pixel_matches_hand_product() {
        let m = gamut_matrix(ColorSpace::Rec2020, ColorSpace::Rec709);
        let px = [0.2f32, 0.5, 0.9];
        let img = ColorImage::from_fn(1, 1, ColorSpace::Rec2020, Domain::Linear, |_, _| px);
        let out = apply_matrix(&img, &m).unwrap().pixel(0, 0);
        for r in 0..3 {
            let mut acc = 0.0f64;
            for c in 0..3 {
                acc += m.m[r][c] * px[c] as f64;
            }
            assert_eq!(out[r], acc as f32);
        }
    }
}
