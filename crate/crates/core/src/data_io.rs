//! PNG I/O, patch cropping, box downsampling and dataset manifests.
//!
//! 10-bit HDR codes are stored in 16-bit PNGs left-justified to the full
//! range: code `k` is written as `round(k * 65535 / 1023)`. Loading with a
//! 10-bit grid divides by 65535 and snaps back to `k / 1023`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::{ColorError, ColorImage, ColorSpace, Domain, QuantSpec, TransferFn};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: PNG decode failed: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("{path}: PNG encode failed: {msg}")]
    Encode { path: PathBuf, msg: String },
    #[error("{path}: expected {expected}-bit samples, found {found}-bit")]
    BitDepth { path: PathBuf, expected: u8, found: u8 },
    #[error("{path}: unsupported color type {kind}")]
    ColorType { path: PathBuf, kind: String },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Color(#[from] ColorError),
}

/// Pixel-aligned SDR input and HDR target.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub sdr: ColorImage,
    pub hdr: ColorImage,
}

impl ImagePair {
    pub fn new(sdr: ColorImage, hdr: ColorImage) -> Self {
        debug_assert!(sdr.same_shape(&hdr));
        Self { sdr, hdr }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One manifest entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub sdr_path: PathBuf,
    pub hdr_path: PathBuf,
    pub split: Split,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Default tags for a loaded PNG: 8-bit files are SDR (Rec.709, gamma),
/// 16-bit files are HDR (Rec.2020, PQ).
pub fn default_tags(bits: u8) -> (ColorSpace, Domain) {
    if bits == 8 {
        (ColorSpace::Rec709, Domain::Encoded(TransferFn::SDR))
    } else {
        (ColorSpace::Rec2020, Domain::Encoded(TransferFn::Pq))
    }
}

/// Reads an RGB(A) PNG of the expected bit depth into [0,1] values `v / (2^bits - 1)`.
pub fn load_png(path: &Path, expected_bits: u8) -> Result<ColorImage, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let decode = |e: png::DecodingError| DataError::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut reader = decoder.read_info().map_err(decode)?;
    let info = reader.info();
    let found = match info.bit_depth {
        png::BitDepth::Eight => 8,
        png::BitDepth::Sixteen => 16,
        other => other as u8,
    };
    if found != expected_bits {
        return Err(DataError::BitDepth {
            path: path.to_path_buf(),
            expected: expected_bits,
            found,
        });
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => {
            log::warn!("{}: dropping alpha channel", path.display());
            4
        }
        other => {
            return Err(DataError::ColorType {
                path: path.to_path_buf(),
                kind: format!("{other:?}"),
            })
        }
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| DataError::Shape("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(decode)?;
    let line = frame.line_size;
    let n = w * h;
    let mut data = vec![0f32; 3 * n];
    let scale = if expected_bits == 8 { 255.0 } else { 65535.0 };
    for y in 0..h {
        let row = &buf[y * line..(y + 1) * line];
        for x in 0..w {
            for c in 0..3 {
                let s = x * channels + c;
                let v = if expected_bits == 8 {
                    row[s] as f64
                } else {
                    u16::from_be_bytes([row[2 * s], row[2 * s + 1]]) as f64
                };
                data[c * n + y * w + x] = (v / scale) as f32;
            }
        }
    }
    let (space, domain) = default_tags(expected_bits);
    let mut img = ColorImage::from_planes(w, h, data, space, domain)?;
    img.bits = Some(expected_bits as u32);
    Ok(img)
}

/// Snaps values onto the `bits` code grid, e.g. 10-bit codes stored in a 16-bit file.
pub fn regrid(img: &ColorImage, bits: u32) -> Result<ColorImage, DataError> {
    let q = QuantSpec::new(bits)?;
    let data = img.data().iter().map(|&v| q.apply(v as f64) as f32).collect();
    let mut out = img.with_data(data);
    out.bits = Some(bits);
    Ok(out)
}

/// Writes an RGB PNG with `bits` (8 or 16) per sample; values are clamped to [0,1].
pub fn save_png(img: &ColorImage, path: &Path, bits: u8) -> Result<(), DataError> {
    if bits != 8 && bits != 16 {
        return Err(DataError::Shape(format!("PNG output must be 8 or 16 bits, got {bits}")));
    }
    let (w, h) = (img.width(), img.height());
    let n = img.pixel_count();
    let bytes_per = (bits / 8) as usize;
    let mut buf = Vec::with_capacity(3 * n * bytes_per);
    let d = img.data();
    for i in 0..n {
        for c in 0..3 {
            let v = (d[c * n + i] as f64).clamp(0.0, 1.0);
            if bits == 8 {
                buf.push((v * 255.0).round() as u8);
            } else {
                buf.extend_from_slice(&((v * 65535.0).round() as u16).to_be_bytes());
            }
        }
    }
    let file = File::create(path).map_err(io_err(path))?;
    let encode = |e: png::EncodingError| DataError::Encode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(if bits == 8 {
        png::BitDepth::Eight
    } else {
        png::BitDepth::Sixteen
    });
    let mut writer = enc.write_header().map_err(encode)?;
    writer.write_image_data(&buf).map_err(encode)?;
    writer.finish().map_err(encode)?;
    Ok(())
}

/// Number of sliding-window positions along one axis.
fn positions(len: usize, size: usize, step: usize) -> usize {
    (len - size) / step + 1
}

/// Aligned sliding-window crops from both images of a pair.
pub fn crop_patches(pair: &ImagePair, size: usize, step: usize) -> Result<Vec<ImagePair>, DataError> {
    let (w, h) = (pair.sdr.width(), pair.sdr.height());
    if !pair.sdr.same_shape(&pair.hdr) {
        return Err(DataError::Shape("SDR and HDR sizes differ".into()));
    }
    if size == 0 || step == 0 || size > w || size > h {
        return Err(DataError::Shape(format!(
            "patch {size} (step {step}) does not fit {w}x{h}"
        )));
    }
    let mut out = Vec::with_capacity(positions(h, size, step) * positions(w, size, step));
    for py in 0..positions(h, size, step) {
        for px in 0..positions(w, size, step) {
            let (x0, y0) = (px * step, py * step);
            out.push(ImagePair::new(
                pair.sdr.crop(x0, y0, size, size)?,
                pair.hdr.crop(x0, y0, size, size)?,
            ));
        }
    }
    Ok(out)
}

/// Non-overlapping `factor`x`factor` box means. Edge boxes that run past the
/// image average only the pixels they cover.
pub fn downsample_box(img: &ColorImage, factor: usize) -> Result<ColorImage, DataError> {
    let (w, h) = (img.width(), img.height());
    if factor == 0 || w < factor || h < factor {
        return Err(DataError::Shape(format!("cannot downsample {w}x{h} by {factor}")));
    }
    let ow = w.div_ceil(factor);
    let oh = h.div_ceil(factor);
    let mut data = vec![0f32; 3 * ow * oh];
    for c in 0..3 {
        let plane = img.plane(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, y1) = (oy * factor, ((oy + 1) * factor).min(h));
                let (x0, x1) = (ox * factor, ((ox + 1) * factor).min(w));
                let mut acc = 0.0f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += plane[y * w + x] as f64;
                    }
                }
                data[c * ow * oh + oy * ow + ox] = (acc / ((y1 - y0) * (x1 - x0)) as f64) as f32;
            }
        }
    }
    let mut out = ColorImage::new(ow, oh, img.space, img.domain);
    out.data_mut().copy_from_slice(&data);
    Ok(out)
}

/// Parses a manifest: one pair per line, `sdr hdr [train|val|test]`,
/// tab- or whitespace-separated; `#` starts a comment. Relative paths are
/// resolved against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<PairSample>, DataError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = if line.contains('\t') {
            line.split('\t').map(str::trim).filter(|s| !s.is_empty()).collect()
        } else {
            line.split_whitespace().collect()
        };
        let split = match fields.get(2).copied() {
            None | Some("train") => Split::Train,
            Some("val") => Split::Val,
            Some("test") => Split::Test,
            Some(other) => {
                return Err(DataError::Manifest {
                    line: i + 1,
                    msg: format!("unknown split tag {other:?}"),
                })
            }
        };
        if fields.len() < 2 || fields.len() > 3 {
            return Err(DataError::Manifest {
                line: i + 1,
                msg: format!("expected 2 or 3 fields, found {}", fields.len()),
            });
        }
        out.push(PairSample {
            sdr_path: base.join(fields[0]),
            hdr_path: base.join(fields[1]),
            split,
        });
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<PairSample>, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

pub fn write_manifest(path: &Path, samples: &[PairSample]) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let tag = match s.split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        writeln!(w, "{}\t{}\t{}", s.sdr_path.display(), s.hdr_path.display(), tag).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Loads an 8-bit SDR / 16-bit HDR pair; `hdr_grid` re-grids HDR codes.
pub fn load_pair(sample: &PairSample, hdr_grid: Option<u32>) -> Result<ImagePair, DataError> {
    let sdr = load_png(&sample.sdr_path, 8)?;
    let mut hdr = load_png(&sample.hdr_path, 16)?;
    if let Some(bits) = hdr_grid {
        hdr = regrid(&hdr, bits)?;
    }
    if !sdr.same_shape(&hdr) {
        return Err(DataError::Shape(format!(
            "{} is {}x{} but {} is {}x{}",
            sample.sdr_path.display(),
            sdr.width(),
            sdr.height(),
            sample.hdr_path.display(),
            hdr.width(),
            hdr.height()
        )));
    }
    Ok(ImagePair::new(sdr, hdr))
}

/// Loads pairs on a worker thread, keeping at most `capacity` decoded pairs in flight.
pub fn prefetch_pairs(
    samples: Vec<PairSample>,
    hdr_grid: Option<u32>,
    capacity: usize,
) -> impl Iterator<Item = Result<ImagePair, DataError>> {
    let (tx, rx) = mpsc::sync_channel(capacity.max(1));
    thread::spawn(move || {
        for s in &samples {
            if tx.send(load_pair(s, hdr_grid)).is_err() {
                break;
            }
        }
    });
    rx.into_iter()
}

/// Reads a text file line by line; used for small sidecar files.
pub fn read_lines(path: &Path) -> Result<Vec<String>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> ColorImage {
        ColorImage::from_fn(w, h, ColorSpace::Rec709, Domain::Encoded(TransferFn::SDR), |x, y| {
            [
                x as f32 / w as f32,
                y as f32 / h as f32,
                ((x * 7 + y * 3) % 11) as f32 / 10.0,
            ]
        })
    }

    #[test]
    fn eight_bit_white_loads_as_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.png");
        let img = ColorImage::from_fn(3, 2, ColorSpace::Rec709, Domain::Encoded(TransferFn::SDR), |_, _| {
            [1.0; 3]
        });
        save_png(&img, &p, 8).unwrap();
        let back = load_png(&p, 8).unwrap();
        assert!(back.data().iter().all(|&v| v == 1.0));
        assert!(matches!(load_png(&p, 16), Err(DataError::BitDepth { .. })));
    }

    #[test]
    fn sixteen_bit_black_loads_as_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.png");
        save_png(
            &ColorImage::new(4, 4, ColorSpace::Rec2020, Domain::Encoded(TransferFn::Pq)),
            &p,
            16,
        )
        .unwrap();
        assert!(load_png(&p, 16).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sixteen_bit_round_trip_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.png");
        let img = ColorImage::from_fn(17, 9, ColorSpace::Rec2020, Domain::Encoded(TransferFn::Pq), |x, y| {
            let u = crate::formation::counter_unit(3, 0, (y * 17 + x) as u64) as f32;
            [u, 1.0 - u, (u * 7.0).fract()]
        });
        save_png(&img, &p, 16).unwrap();
        let back = load_png(&p, 16).unwrap();
        let worst = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(worst as f64 <= 0.5 / 65535.0 + 1e-7, "{worst}");
        // saving the loaded image again reproduces the same file
        let p2 = dir.path().join("r2.png");
        save_png(&back, &p2, 16).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn ten_bit_codes_survive_sixteen_bit_storage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        let img = ColorImage::from_fn(1024, 1, ColorSpace::Rec2020, Domain::Encoded(TransferFn::Pq), |x, _| {
            let v = x as f32 / 1023.0;
            [v, v, v]
        });
        save_png(&img, &p, 16).unwrap();
        let back = regrid(&load_png(&p, 16).unwrap(), 10).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn patch_counts() {
        let one = ImagePair::new(ramp(480, 480), ramp(480, 480));
        assert_eq!(crop_patches(&one, 480, 240).unwrap().len(), 1);
        let big = ImagePair::new(ramp(960, 960), ramp(960, 960));
        let patches = crop_patches(&big, 480, 240).unwrap();
        assert_eq!(patches.len(), 9);
        assert_eq!(patches[4].sdr, big.sdr.crop(240, 240, 480, 480).unwrap());
        assert_eq!(patches[4].hdr, big.hdr.crop(240, 240, 480, 480).unwrap());
        assert!(crop_patches(&one, 481, 1).is_err());
    }

    #[test]
    fn box_downsample() {
        let c = ColorImage::from_fn(8, 8, ColorSpace::Rec709, Domain::Linear, |_, _| [0.3, 0.6, 0.9]);
        let d = downsample_box(&c, 4).unwrap();
        assert_eq!((d.width(), d.height()), (2, 2));
        assert!(d
            .data()
            .iter()
            .zip([0.3f32, 0.6, 0.9].iter().flat_map(|v| [*v; 4]))
            .all(|(a, b)| (a - b).abs() < 1e-7));

        let checker = ColorImage::from_fn(4, 4, ColorSpace::Rec709, Domain::Linear, |x, y| {
            [((x + y) % 2) as f32; 3]
        });
        let d = downsample_box(&checker, 4).unwrap();
        assert_eq!(d.pixel(0, 0), [0.5; 3]);

        let r = ramp(16, 12);
        let d = downsample_box(&r, 4).unwrap();
        for c in 0..3 {
            let m0: f64 = r.plane(c).iter().map(|&v| v as f64).sum::<f64>() / r.pixel_count() as f64;
            let m1: f64 = d.plane(c).iter().map(|&v| v as f64).sum::<f64>() / d.pixel_count() as f64;
            assert!((m0 - m1).abs() < 1e-6);
        }
    }

    #[test]
    fn manifest_parsing() {
        let text = "# pairs\na/s1.png a/h1.png\nb s2.png\tb h2.png\tval\n\n";
        let m = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].sdr_path, Path::new("/data/a/s1.png"));
        assert_eq!(m[0].split, Split::Train);
        assert_eq!(m[1].hdr_path, Path::new("/data/b h2.png"));
        assert_eq!(m[1].split, Split::Val);
        let err = parse_manifest("x.png\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, DataError::Manifest { line: 1, .. }));
        assert!(parse_manifest("a b bogus\n", Path::new(".")).is_err());
    }
}
