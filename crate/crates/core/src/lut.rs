//! 3D lookup tables: baking per-pixel mappings, trilinear application,
//! `.cube` interchange and manifold point-cloud export.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agcm::PixelMapper;
use crate::color::{gamma_eotf, gamma_oetf, ColorImage, ColorSpace, Domain, TransferFn};

/// Sizes used for baking: 17, 33 and 64 nodes per axis.
pub const STANDARD_SIZES: [usize; 3] = [17, 33, 64];
const MAX_SIZE: usize = 256;

#[derive(Debug, Error)]
pub enum LutError {
    #[error("invalid LUT: {0}")]
    Invalid(String),
    #[error("mapping returned a non-finite value at node ({r}, {g}, {b})")]
    NonFinite { r: usize, g: usize, b: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LutError + '_ {
    move |source| LutError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Coordinates the lattice is uniform in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Lattice {
    /// Encoded (gamma) SDR code values.
    #[default]
    Encoded,
    /// Display-linear SDR light; inputs are decoded before lookup.
    DisplayLinear,
}

impl Lattice {
    fn name(self) -> &'static str {
        match self {
            Lattice::Encoded => "encoded",
            Lattice::DisplayLinear => "display-linear",
        }
    }

    fn to_code(self, u: f32) -> f32 {
        match self {
            Lattice::Encoded => u,
            Lattice::DisplayLinear => gamma_oetf(u as f64).unwrap_or(0.0) as f32,
        }
    }

    fn from_code(self, v: f32) -> f32 {
        match self {
            Lattice::Encoded => v,
            Lattice::DisplayLinear => gamma_eotf(v as f64).unwrap_or(0.0) as f32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lut3d {
    size: usize,
    /// Red index varies fastest: entry `r + N (g + N b)`.
    table: Vec<[f32; 3]>,
    pub domain_min: [f32; 3],
    pub domain_max: [f32; 3],
    pub lattice: Lattice,
    pub output_space: ColorSpace,
    pub output_domain: Domain,
}

impl Lut3d {
    pub fn new(size: usize, table: Vec<[f32; 3]>) -> Result<Self, LutError> {
        if !(2..=MAX_SIZE).contains(&size) {
            return Err(LutError::Invalid(format!("size {size} outside 2..={MAX_SIZE}")));
        }
        if table.len() != size * size * size {
            return Err(LutError::Invalid(format!(
                "{} entries for size {size}, expected {}",
                table.len(),
                size * size * size
            )));
        }
        if let Some(i) = table.iter().position(|e| e.iter().any(|v| !v.is_finite())) {
            let (r, g, b) = (i % size, i / size % size, i / (size * size));
            return Err(LutError::NonFinite { r, g, b });
        }
        Ok(Self {
            size,
            table,
            domain_min: [0.0; 3],
            domain_max: [1.0; 3],
            lattice: Lattice::Encoded,
            output_space: ColorSpace::Rec2020,
            output_domain: Domain::Encoded(TransferFn::Pq),
        })
    }

    pub fn identity(size: usize) -> Result<Self, LutError> {
        bake_lut(size, Lattice::Encoded, |c| c)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn table(&self) -> &[[f32; 3]] {
        &self.table
    }

    pub fn entry(&self, r: usize, g: usize, b: usize) -> [f32; 3] {
        self.table[r + self.size * (g + self.size * b)]
    }

    /// Lattice input color of node `(r, g, b)` in lattice coordinates.
    pub fn node_input(&self, r: usize, g: usize, b: usize) -> [f32; 3] {
        let n = (self.size - 1) as f32;
        let at = |c: usize, i: usize| self.domain_min[c] + (self.domain_max[c] - self.domain_min[c]) * (i as f32 / n);
        [at(0, r), at(1, g), at(2, b)]
    }

    /// Offset and scale from domain values to lattice coordinates.
    fn axes(&self) -> ([f32; 3], [f32; 3]) {
        let top = (self.size - 1) as f32;
        let scale = [0, 1, 2].map(|c| top / (self.domain_max[c] - self.domain_min[c]));
        (self.domain_min, scale)
    }

    /// Trilinear lookup of one lattice-coordinate color; inputs are clamped
    /// to the domain.
    pub fn lookup(&self, rgb: [f32; 3]) -> [f32; 3] {
        self.lookup_on(rgb, self.axes())
    }

    fn lookup_on(&self, rgb: [f32; 3], (lo, scale): ([f32; 3], [f32; 3])) -> [f32; 3] {
        let n = self.size;
        let top = (n - 1) as f32;
        // coordinates within rounding distance of a node snap onto it
        let tol = 8.0 * f32::EPSILON * top;
        let mut i0 = [0usize; 3];
        let mut f = [0f32; 3];
        for c in 0..3 {
            let x = ((rgb[c] - lo[c]) * scale[c]).clamp(0.0, top);
            let mut i = x as usize;
            let mut fr = x - i as f32;
            if fr <= tol {
                fr = 0.0;
            } else if 1.0 - fr <= tol {
                i += 1;
                fr = 0.0;
            }
            if i > n - 2 {
                fr += (i - (n - 2)) as f32;
                i = n - 2;
            }
            i0[c] = i;
            f[c] = fr;
        }
        let idx = |r: usize, g: usize, b: usize| r + n * (g + n * b);
        let base = idx(i0[0], i0[1], i0[2]);
        let (dr, dg, db) = (1, n, n * n);
        let t = &self.table;
        let k = [
            t[base],
            t[base + dr],
            t[base + dg],
            t[base + dg + dr],
            t[base + db],
            t[base + db + dr],
            t[base + db + dg],
            t[base + db + dg + dr],
        ];
        let lerp = |a: f32, b: f32, w: f32| a * (1.0 - w) + b * w;
        let mut out = [0f32; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let c00 = lerp(k[0][c], k[1][c], f[0]);
            let c10 = lerp(k[2][c], k[3][c], f[0]);
            let c01 = lerp(k[4][c], k[5][c], f[0]);
            let c11 = lerp(k[6][c], k[7][c], f[0]);
            *o = lerp(lerp(c00, c10, f[1]), lerp(c01, c11, f[1]), f[2]);
        }
        out
    }

    /// Lookup of an encoded input color, converting it to lattice coordinates.
    pub fn map(&self, rgb: [f32; 3]) -> [f32; 3] {
        self.lookup(rgb.map(|v| self.lattice.from_code(v)))
    }

    fn map_on(&self, rgb: [f32; 3], axes: ([f32; 3], [f32; 3])) -> [f32; 3] {
        match self.lattice {
            Lattice::Encoded => self.lookup_on(rgb, axes),
            Lattice::DisplayLinear => self.lookup_on(rgb.map(|v| self.lattice.from_code(v)), axes),
        }
    }
}

/// Evaluates `mapping` at every lattice node. `mapping` receives encoded
/// input colors; for a display-linear lattice the nodes are encoded first.
pub fn bake_lut<F>(size: usize, lattice: Lattice, mapping: F) -> Result<Lut3d, LutError>
where
    F: Fn([f32; 3]) -> [f32; 3] + Sync,
{
    if !(2..=MAX_SIZE).contains(&size) {
        return Err(LutError::Invalid(format!("size {size} outside 2..={MAX_SIZE}")));
    }
    let top = (size - 1) as f32;
    let table: Vec<[f32; 3]> = (0..size * size * size)
        .into_par_iter()
        .map(|i| {
            let (r, g, b) = (i % size, i / size % size, i / (size * size));
            let u = [r as f32 / top, g as f32 / top, b as f32 / top];
            mapping(u.map(|v| lattice.to_code(v)))
        })
        .collect();
    let mut lut = Lut3d::new(size, table)?;
    lut.lattice = lattice;
    Ok(lut)
}

/// Bakes a frozen per-pixel network; the LUT inherits its output tags.
pub fn bake_mapper(mapper: &PixelMapper, size: usize, lattice: Lattice) -> Result<Lut3d, LutError> {
    let mut lut = bake_lut(size, lattice, |c| mapper.map(c))?;
    lut.output_space = mapper.output_space();
    lut.output_domain = mapper.output_domain();
    Ok(lut)
}

fn check_input(img: &ColorImage) -> Result<(), LutError> {
    if !matches!(img.domain, Domain::Encoded(_)) {
        return Err(LutError::Invalid("LUT input must be an encoded image".into()));
    }
    Ok(())
}

fn map_row(lut: &Lut3d, src: [&[f32]; 3], out: [&mut [f32]; 3]) {
    let [r, g, b] = out;
    let axes = lut.axes();
    for i in 0..r.len() {
        let p = lut.map_on([src[0][i], src[1][i], src[2][i]], axes);
        r[i] = p[0].clamp(0.0, 1.0);
        g[i] = p[1].clamp(0.0, 1.0);
        b[i] = p[2].clamp(0.0, 1.0);
    }
}

fn output(lut: &Lut3d, w: usize, h: usize, data: Vec<f32>) -> ColorImage {
    ColorImage::from_planes(w, h, data, lut.output_space, lut.output_domain).expect("finite LUT entries")
}

/// Row-parallel trilinear application.
pub fn apply_lut(img: &ColorImage, lut: &Lut3d) -> Result<ColorImage, LutError> {
    check_input(img)?;
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    let mut data = vec![0f32; 3 * n];
    let (r, gb) = data.split_at_mut(n);
    let (g, b) = gb.split_at_mut(n);
    let row = w.max(1);
    let src = [img.plane(0), img.plane(1), img.plane(2)];
    r.par_chunks_mut(row)
        .zip(g.par_chunks_mut(row))
        .zip(b.par_chunks_mut(row))
        .enumerate()
        .for_each(|(y, ((r, g), b))| {
            let span = y * row..y * row + r.len();
            map_row(lut, src.map(|p| &p[span.clone()]), [r, g, b]);
        });
    Ok(output(lut, w, h, data))
}

/// Same result as [`apply_lut`] on the calling thread only.
pub fn apply_lut_serial(img: &ColorImage, lut: &Lut3d) -> Result<ColorImage, LutError> {
    check_input(img)?;
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    let mut data = vec![0f32; 3 * n];
    let (r, gb) = data.split_at_mut(n);
    let (g, b) = gb.split_at_mut(n);
    map_row(lut, [img.plane(0), img.plane(1), img.plane(2)], [r, g, b]);
    Ok(output(lut, w, h, data))
}

pub fn cube_string(lut: &Lut3d, title: Option<&str>) -> String {
    let n = lut.size;
    let mut s = String::with_capacity(n * n * n * 28 + 256);
    if let Some(t) = title {
        let _ = writeln!(s, "TITLE \"{t}\"");
    }
    let _ = writeln!(s, "# LATTICE {}", lut.lattice.name());
    let _ = writeln!(
        s,
        "# OUTPUT {}",
        serde_json::to_string(&(lut.output_space, lut.output_domain)).unwrap()
    );
    let _ = writeln!(s, "LUT_3D_SIZE {n}");
    let [a, b, c] = lut.domain_min;
    let _ = writeln!(s, "DOMAIN_MIN {a:.6} {b:.6} {c:.6}");
    let [a, b, c] = lut.domain_max;
    let _ = writeln!(s, "DOMAIN_MAX {a:.6} {b:.6} {c:.6}");
    for [r, g, b] in &lut.table {
        let _ = writeln!(s, "{r:.6} {g:.6} {b:.6}");
    }
    s
}

pub fn export_cube(lut: &Lut3d, path: &Path, title: Option<&str>) -> Result<(), LutError> {
    fs::write(path, cube_string(lut, title)).map_err(io_err(path))
}

fn parse_triple(rest: &[&str], line: usize) -> Result<[f32; 3], LutError> {
    if rest.len() != 3 {
        return Err(LutError::Parse {
            line,
            msg: format!("expected 3 values, found {}", rest.len()),
        });
    }
    let mut out = [0f32; 3];
    for (o, tok) in out.iter_mut().zip(rest) {
        *o = tok
            .parse::<f32>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| LutError::Parse {
                line,
                msg: format!("not a number: {tok:?}"),
            })?;
    }
    Ok(out)
}

pub fn parse_cube(text: &str) -> Result<Lut3d, LutError> {
    let mut size = None;
    let mut dmin = [0f32; 3];
    let mut dmax = [1f32; 3];
    let mut lattice = Lattice::Encoded;
    let mut tags = None;
    let mut table = Vec::new();
    let mut last = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        last = line;
        let t = raw.trim();
        if let Some(c) = t.strip_prefix('#') {
            let c = c.trim();
            if let Some(v) = c.strip_prefix("LATTICE ") {
                lattice = match v.trim() {
                    "encoded" => Lattice::Encoded,
                    "display-linear" => Lattice::DisplayLinear,
                    other => {
                        return Err(LutError::Parse {
                            line,
                            msg: format!("unknown lattice {other:?}"),
                        })
                    }
                };
            } else if let Some(v) = c.strip_prefix("OUTPUT ") {
                tags = Some(
                    serde_json::from_str::<(ColorSpace, Domain)>(v.trim()).map_err(|e| LutError::Parse {
                        line,
                        msg: format!("bad output tags: {e}"),
                    })?,
                );
            }
            continue;
        }
        if t.is_empty() {
            continue;
        }
        let toks: Vec<&str> = t.split_whitespace().collect();
        match toks[0] {
            "TITLE" => {}
            "LUT_3D_SIZE" => {
                if size.is_some() || !table.is_empty() {
                    return Err(LutError::Parse {
                        line,
                        msg: "LUT_3D_SIZE must appear once before the data".into(),
                    });
                }
                let n = toks
                    .get(1)
                    .and_then(|v| v.parse::<usize>().ok())
                    .filter(|n| (2..=MAX_SIZE).contains(n) && toks.len() == 2)
                    .ok_or_else(|| LutError::Parse {
                        line,
                        msg: format!("bad LUT_3D_SIZE {:?}", &toks[1..]),
                    })?;
                size = Some(n);
            }
            "DOMAIN_MIN" => dmin = parse_triple(&toks[1..], line)?,
            "DOMAIN_MAX" => dmax = parse_triple(&toks[1..], line)?,
            "LUT_1D_SIZE" | "LUT_1D_INPUT_RANGE" => {
                return Err(LutError::Parse {
                    line,
                    msg: "1D LUTs are not supported".into(),
                })
            }
            _ => {
                let n = size.ok_or_else(|| LutError::Parse {
                    line,
                    msg: "data before LUT_3D_SIZE".into(),
                })?;
                if table.len() == n * n * n {
                    return Err(LutError::Parse {
                        line,
                        msg: format!("more than {} data lines", n * n * n),
                    });
                }
                table.push(parse_triple(&toks, line)?);
            }
        }
    }
    let n = size.ok_or(LutError::Parse {
        line: last,
        msg: "missing LUT_3D_SIZE".into(),
    })?;
    if table.len() != n * n * n {
        return Err(LutError::Parse {
            line: last,
            msg: format!("expected {} data lines, found {}", n * n * n, table.len()),
        });
    }
    if (0..3).any(|c| dmax[c] <= dmin[c]) {
        return Err(LutError::Invalid(format!("empty domain {dmin:?}..{dmax:?}")));
    }
    let mut lut = Lut3d::new(n, table)?;
    lut.domain_min = dmin;
    lut.domain_max = dmax;
    lut.lattice = lattice;
    if let Some((s, d)) = tags {
        lut.output_space = s;
        lut.output_domain = d;
    }
    Ok(lut)
}

pub fn import_cube(path: &Path) -> Result<Lut3d, LutError> {
    parse_cube(&fs::read_to_string(path).map_err(io_err(path))?)
}

/// One manifold point: lattice input color and mapped output color.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManifoldPoint {
    pub input: [f32; 3],
    pub output: [f32; 3],
}

/// The LUT's nodes as `(input color, output coordinates)` pairs, red fastest.
pub fn manifold_points(lut: &Lut3d) -> Vec<ManifoldPoint> {
    let n = lut.size;
    (0..n * n * n)
        .map(|i| ManifoldPoint {
            input: lut.node_input(i % n, i / n % n, i / (n * n)),
            output: lut.table[i],
        })
        .collect()
}

pub fn manifold_csv(points: &[ManifoldPoint]) -> String {
    let mut s = String::from("r_in,g_in,b_in,r_out,g_out,b_out\n");
    for p in points {
        let [a, b, c] = p.input;
        let [d, e, f] = p.output;
        let _ = writeln!(s, "{a:.6},{b:.6},{c:.6},{d:.6},{e:.6},{f:.6}");
    }
    s
}

/// ASCII PLY: vertex position is the output color, vertex color the input.
pub fn manifold_ply(points: &[ManifoldPoint]) -> String {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    );
    for p in points {
        let [x, y, z] = p.output;
        let [r, g, b] = p.input.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        let _ = writeln!(s, "{x:.6} {y:.6} {z:.6} {r} {g} {b}");
    }
    s
}

pub fn export_manifold(points: &[ManifoldPoint], csv: &Path, ply: Option<&Path>) -> Result<(), LutError> {
    let mut f = BufWriter::new(fs::File::create(csv).map_err(io_err(csv))?);
    f.write_all(manifold_csv(points).as_bytes()).map_err(io_err(csv))?;
    f.flush().map_err(io_err(csv))?;
    if let Some(p) = ply {
        fs::write(p, manifold_ply(points)).map_err(io_err(p))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BenchReport {
    pub width: usize,
    pub height: usize,
    pub lut_size: usize,
    pub seconds: f64,
    pub mpix_per_s: f64,
}

/// Times single-threaded application of `lut` to a `w`×`h` gradient frame;
/// reports the fastest of `reps` runs.
pub fn bench_apply(lut: &Lut3d, w: usize, h: usize, reps: usize) -> Result<BenchReport, LutError> {
    let frame = ColorImage::from_fn(w, h, ColorSpace::Rec709, Domain::Encoded(TransferFn::SDR), |x, y| {
        let u = x as f32 / w.max(2) as f32;
        let v = y as f32 / h.max(2) as f32;
        [u, v, 1.0 - 0.5 * (u + v)]
    });
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        let out = apply_lut_serial(&frame, lut)?;
        best = best.min(t.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    Ok(BenchReport {
        width: w,
        height: h,
        lut_size: lut.size,
        seconds: best,
        mpix_per_s: (w * h) as f64 / best / 1e6,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sdr(w: usize, h: usize, seed: u64) -> ColorImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = (0..3 * w * h).map(|_| rng.random()).collect();
        ColorImage::from_planes(w, h, d, ColorSpace::Rec709, Domain::Encoded(TransferFn::SDR)).unwrap()
    }

    fn random_lut(n: usize, seed: u64) -> Lut3d {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Lut3d::new(
            n,
            (0..n * n * n)
                .map(|_| [rng.random(), rng.random(), rng.random()])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_and_constant_bake() {
        let lut = Lut3d::identity(17).unwrap();
        for (r, g, b) in [(0, 0, 0), (3, 7, 16), (16, 16, 16)] {
            assert_eq!(lut.entry(r, g, b), [r as f32 / 16.0, g as f32 / 16.0, b as f32 / 16.0]);
        }
        let c = bake_lut(5, Lattice::Encoded, |_| [0.1, 0.2, 0.3]).unwrap();
        assert!(c.table().iter().all(|e| *e == [0.1, 0.2, 0.3]));
        assert_eq!(lut.table().len(), 17 * 17 * 17);
    }

    #[test]
    fn nan_mapping_reports_node() {
        let err = bake_lut(5, Lattice::Encoded, |c| {
            if c[0] > 0.6 && c[2] == 0.0 {
                [f32::NAN; 3]
            } else {
                c
            }
        })
        .unwrap_err();
        assert!(matches!(err, LutError::NonFinite { r: 3, g: 0, b: 0 }), "{err}");
    }

    #[test]
    fn identity_lut_is_identity() {
        let img = sdr(40, 30, 1);
        let out = apply_lut(&img, &Lut3d::identity(33).unwrap()).unwrap();
        let max = img
            .data()
            .iter()
            .zip(out.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(max <= 1e-6, "{max}");
    }

    #[test]
    fn nodes_are_exact() {
        for n in [17, 33, 64] {
            let lut = random_lut(n, n as u64);
            for r in 0..n {
                for (g, b) in [(0, 0), (n / 2, 1), (n - 1, n - 1)] {
                    let x = lut.node_input(r, g, b);
                    assert_eq!(lut.lookup(x), lut.entry(r, g, b), "n={n} node ({r},{g},{b})");
                }
            }
        }
    }

    #[test]
    fn matches_corner_oracle() {
        let lut = random_lut(9, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let x: Vec<f64> = p.iter().map(|v| v * 8.0).collect();
            let i: Vec<usize> = x.iter().map(|v| (v.floor() as usize).min(7)).collect();
            let mut expect = [0f64; 3];
            for corner in 0..8 {
                let d = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                let wgt: f64 = (0..3)
                    .map(|c| {
                        let f = x[c] - i[c] as f64;
                        if d[c] == 1 {
                            f
                        } else {
                            1.0 - f
                        }
                    })
                    .product();
                let e = lut.entry(i[0] + d[0], i[1] + d[1], i[2] + d[2]);
                for c in 0..3 {
                    expect[c] += wgt * e[c] as f64;
                }
            }
            let got = lut.lookup(p.map(|v| v as f32));
            for c in 0..3 {
                assert!((got[c] as f64 - expect[c]).abs() < 1e-5, "{got:?} vs {expect:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn affine_mappings_are_reproduced(a in -0.5f32..0.5, b in -0.5f32..0.5, c in 0.0f32..0.5,
                                          r in 0.0f32..1.0, g in 0.0f32..1.0, bl in 0.0f32..1.0) {
            let f = move |x: [f32; 3]| [a * x[0] + b * x[1] + c, 0.3 * x[2] - b * x[0] + 0.1, c + 0.5 * x[1]];
            let lut = bake_lut(17, Lattice::Encoded, f).unwrap();
            let got = lut.lookup([r, g, bl]);
            let want = f([r, g, bl]);
            for k in 0..3 {
                prop_assert!((got[k] - want[k]).abs() <= 1e-6, "{got:?} vs {want:?}");
            }
        }

        #[test]
        fn out_of_domain_inputs_clamp(v in -2.0f32..3.0) {
            let lut = random_lut(5, 4);
            let got = lut.lookup([v, 0.5, 0.5]);
            prop_assert_eq!(got, lut.lookup([v.clamp(0.0, 1.0), 0.5, 0.5]));
        }
    }

    #[test]
    fn parallel_and_serial_agree() {
        let img = sdr(37, 23, 5);
        let lut = random_lut(17, 6);
        assert_eq!(apply_lut(&img, &lut).unwrap(), apply_lut_serial(&img, &lut).unwrap());
    }

    #[test]
    fn display_linear_lattice_round_trip() {
        let decode = |c: [f32; 3]| c.map(|v| gamma_eotf(v as f64).unwrap() as f32);
        let lut = bake_lut(17, Lattice::DisplayLinear, decode).unwrap();
        let img = sdr(16, 16, 7);
        let out = apply_lut(&img, &lut).unwrap();
        let want: Vec<f32> = img
            .data()
            .iter()
            .map(|&v| gamma_eotf(v as f64).unwrap() as f32)
            .collect();
        let max = want
            .iter()
            .zip(out.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(max < 1e-5, "{max}");
        assert!(apply_lut(&lut_linear_input(), &lut).is_err());
    }

    fn lut_linear_input() -> ColorImage {
        ColorImage::new(2, 2, ColorSpace::Rec709, Domain::Linear)
    }

    #[test]
    fn cube_round_trip_and_line_count() {
        let mut lut = random_lut(17, 8);
        lut.lattice = Lattice::DisplayLinear;
        lut.output_space = ColorSpace::Rec709;
        lut.output_domain = Domain::Encoded(TransferFn::SDR);
        let back = parse_cube(&cube_string(&lut, Some("test"))).unwrap();
        let max = lut
            .table()
            .iter()
            .zip(back.table())
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f32::max);
        assert!(max <= 1e-6, "{max}");
        assert_eq!(
            (back.lattice, back.output_space, back.output_domain),
            (lut.lattice, lut.output_space, lut.output_domain)
        );

        let s33 = cube_string(&Lut3d::identity(33).unwrap(), None);
        let data_lines = s33
            .lines()
            .filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit() || c == '-'))
            .count();
        assert_eq!(data_lines, 35_937);
    }

    #[test]
    fn hand_written_cube() {
        let text =
            "TITLE \"tiny\"\n# comment\nLUT_3D_SIZE 2\n\n0 0 0\n1 0 0\n0 1 0\n1 1 0\n0 0 1\n1 0 1\n0 1 1\n1 1 1\n";
        let lut = parse_cube(text).unwrap();
        assert_eq!(lut.size(), 2);
        assert_eq!(lut.table().len(), 8);
        assert_eq!(lut.entry(1, 0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(lut.entry(0, 1, 1), [0.0, 1.0, 1.0]);
        assert_eq!(lut.lookup([0.25, 0.5, 0.75]), [0.25, 0.5, 0.75]);
    }

    #[test]
    fn cube_errors_carry_line_numbers() {
        let line = |text: &str| match parse_cube(text) {
            Err(LutError::Parse { line, .. }) => line,
            other => panic!("{other:?}"),
        };
        assert_eq!(line("LUT_3D_SIZE x\n"), 1);
        assert_eq!(line("0 0 0\n"), 1);
        assert_eq!(line("LUT_3D_SIZE 2\n0 0 0\n0 zero 0\n"), 3);
        assert_eq!(line("LUT_3D_SIZE 2\n0 0\n"), 2);
        assert_eq!(line("LUT_3D_SIZE 2\n0 0 0\n1 1 1\n"), 3);
        let nine = format!("LUT_3D_SIZE 2\n{}", "0 0 0\n".repeat(9));
        assert_eq!(line(&nine), 10);
    }

    #[test]
    fn manifold_of_identity_is_lattice() {
        let lut = Lut3d::identity(5).unwrap();
        let pts = manifold_points(&lut);
        assert_eq!(pts.len(), 125);
        assert!(pts.iter().all(|p| p.input == p.output));
        let csv = manifold_csv(&pts);
        assert_eq!(csv.lines().count(), 126);
        let ply = manifold_ply(&pts);
        assert!(ply.contains("element vertex 125"));
        assert_eq!(ply.lines().count(), 125 + 10);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lut = random_lut(5, 9);
        let p = dir.path().join("a.cube");
        export_cube(&lut, &p, None).unwrap();
        let back = import_cube(&p).unwrap();
        assert_eq!(back.size(), 5);
        assert!(matches!(
            import_cube(&dir.path().join("missing.cube")),
            Err(LutError::Io { .. })
        ));
        let csv = dir.path().join("m.csv");
        let ply = dir.path().join("m.ply");
        export_manifold(&manifold_points(&lut), &csv, Some(&ply)).unwrap();
        assert!(ply.exists() && csv.exists());
    }

    #[test]
    fn bench_reports_throughput() {
        let r = bench_apply(&Lut3d::identity(17).unwrap(), 64, 32, 2).unwrap();
        assert!(r.mpix_per_s > 0.0 && r.seconds > 0.0);
    }
}
