use rand::Rng;

use super::{NnError, Scalar, Tensor};
use crate::filter::reflect;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        stride: usize,
        cols: Option<Vec<T>>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    AvgPool2(Var),
    Gap(Var),
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    Gfm {
        x: Var,
        alpha: Var,
        beta: Var,
    },
    Sft {
        x: Var,
        m: Var,
        n: Var,
    },
    Add(Var, Var),
    Concat(Var, Var),
    Narrow {
        x: Var,
        offset: usize,
    },
    PadReflect {
        x: Var,
    },
    Crop {
        x: Var,
    },
    L1 {
        pred: Var,
        target: Var,
    },
    Dot {
        x: Var,
        w: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::AvgPool2(_) => "avg_pool2",
            Op::Gap(_) => "global_avg_pool",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Dropout { .. } => "dropout",
            Op::PixelShuffle { .. } => "pixel_shuffle",
            Op::Gfm { .. } => "gfm",
            Op::Sft { .. } => "sft",
            Op::Add(..) => "add",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::PadReflect { .. } => "pad_reflect",
            Op::Crop { .. } => "crop",
            Op::L1 { .. } => "l1_loss",
            Op::Dot { .. } => "dot",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Relu(x)
            | Op::LeakyRelu(x, _)
            | Op::AvgPool2(x)
            | Op::Gap(x)
            | Op::InstanceNorm { x, .. }
            | Op::Dropout { x, .. }
            | Op::PixelShuffle { x, .. }
            | Op::Narrow { x, .. }
            | Op::PadReflect { x }
            | Op::Crop { x }
            | Op::Dot { x, .. } => vec![*x],
            Op::Gfm { x, alpha, beta } => vec![*x, *alpha, *beta],
            Op::Sft { x, m, n } => vec![*x, *m, *n],
            Op::Add(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::L1 { pred, target } => vec![*pred, *target],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of operations recorded in execution order; [`Graph::backward`]
/// replays it in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Reflected source coordinates of every kernel tap.
struct Taps {
    rows: Vec<usize>,
    cols: Vec<usize>,
    wo: usize,
    /// Output columns `[lo, hi)` whose stride-1 source needs no reflection.
    interior: [(usize, usize); 3],
}

impl Taps {
    fn new(k: usize, stride: usize, h: usize, w: usize, ho: usize, wo: usize) -> Self {
        let pad = (k / 2) as isize;
        let at = |o: usize, t: usize, n: usize| reflect((o * stride + t) as isize - pad, n);
        let rows = (0..k)
            .flat_map(|ky| (0..ho).map(move |oy| (ky, oy)))
            .map(|(ky, oy)| at(oy, ky, h))
            .collect();
        let cols = (0..k)
            .flat_map(|kx| (0..wo).map(move |ox| (kx, ox)))
            .map(|(kx, ox)| at(ox, kx, w))
            .collect();
        let mut interior = [(0, 0); 3];
        for (kx, r) in interior.iter_mut().enumerate().take(k) {
            let lo = (pad as usize).saturating_sub(kx);
            let hi = (w + pad as usize).saturating_sub(kx).min(wo);
            *r = (lo.min(hi), hi);
        }
        Self {
            rows,
            cols,
            wo,
            interior,
        }
    }

    fn col(&self, kx: usize) -> &[usize] {
        &self.cols[kx * self.wo..(kx + 1) * self.wo]
    }
}

fn shape_err(op: &str, msg: impl std::fmt::Display) -> NnError {
    NnError::Shape(format!("{op}: {msg}"))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            record: true,
        }
    }

    /// Forward-only graph: parameters need no gradient and no backward
    /// buffers are kept.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = self.record && op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient unless `requires_grad` is used).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let mut v = t.clone();
        v.grad = None;
        self.input_with_grad(v)
    }

    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        let v = self.push(t, Op::Leaf);
        self.nodes[v.0].needs_grad = self.record;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    /// Gradient of the last backward target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    fn chw(&self, v: Var, op: &str) -> Result<(usize, usize, usize), NnError> {
        self.value(v)
            .chw()
            .ok_or_else(|| shape_err(op, format!("expected (C,H,W), got {:?}", self.value(v).shape())))
    }

    /// 2-D convolution with `k in {1, 3}`, stride 1 or 2 and reflect padding
    /// of `k / 2`. Weight shape `(Co, Ci, k, k)`, bias `(Co,)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var, NnError> {
        let (ci, h, wd) = self.chw(x, "conv2d")?;
        let ws = self.value(w).shape().to_vec();
        let [co, wci, k, k2] = ws[..] else {
            return Err(shape_err("conv2d", format!("weight shape {ws:?}")));
        };
        if wci != ci || k != k2 || !(k == 1 || k == 3) || !(stride == 1 || stride == 2) {
            return Err(shape_err(
                "conv2d",
                format!("input {ci} channels, weight {ws:?}, stride {stride}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(shape_err("conv2d", "bias shape"));
            }
        }
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let p = ho * wo;
        let kk = ci * k * k;
        let direct = k == 1 && stride == 1;
        let cols = if direct {
            None
        } else {
            let xv = self.value(x).data();
            let mut cols = vec![T::zero(); kk * p];
            let taps = Taps::new(k, stride, h, wd, ho, wo);
            for c in 0..ci {
                let plane = &xv[c * h * wd..(c + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                        let xi = taps.col(kx);
                        let (lo, hi) = taps.interior[kx];
                        for oy in 0..ho {
                            let sy = taps.rows[ky * ho + oy];
                            let src = &plane[sy * wd..(sy + 1) * wd];
                            let dst = &mut row[oy * wo..(oy + 1) * wo];
                            if stride == 1 {
                                dst[lo..hi].copy_from_slice(&src[lo + kx - pad..hi + kx - pad]);
                                for ox in (0..lo).chain(hi..wo) {
                                    dst[ox] = src[xi[ox]];
                                }
                            } else {
                                for (d, &sx) in dst.iter_mut().zip(xi) {
                                    *d = src[sx];
                                }
                            }
                        }
                    }
                }
            }
            Some(cols)
        };
        let mut out = vec![T::zero(); co * p];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (o, row) in out.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = bv[o]);
            }
        }
        {
            let wv = self.value(w).data();
            let src = cols.as_deref().unwrap_or_else(|| self.value(x).data());
            T::gemm(
                co,
                kk,
                p,
                wv,
                (kk as isize, 1),
                src,
                (p as isize, 1),
                T::one(),
                &mut out,
                (p as isize, 1),
            );
        }
        let keep = self.record && !direct;
        let out = Tensor::from_vec(&[co, ho, wo], out);
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                k,
                stride,
                cols: if keep { cols } else { None },
            },
        ))
    }

    /// `y = W x + b` for a vector `x` of shape `(K,)` and `W` of shape `(O, K)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NnError> {
        let xv = self.value(x);
        let ws = self.value(w).shape();
        if xv.shape().len() != 1 || ws.len() != 2 || ws[1] != xv.len() {
            return Err(shape_err("linear", format!("x {:?}, w {:?}", xv.shape(), ws)));
        }
        let (o, k) = (ws[0], ws[1]);
        let wv = self.value(w).data();
        let xd = xv.data();
        let mut out: Vec<T> = match b {
            Some(b) => {
                if self.value(b).shape() != [o] {
                    return Err(shape_err("linear", "bias shape"));
                }
                self.value(b).data().to_vec()
            }
            None => vec![T::zero(); o],
        };
        for (i, y) in out.iter_mut().enumerate() {
            let row = &wv[i * k..(i + 1) * k];
            *y += row.iter().zip(xd).fold(T::zero(), |a, (&w, &x)| a + w * x);
        }
        Ok(self.push(Tensor::from_vec(&[o], out), Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let out = Tensor::from_vec(t.shape(), out);
        self.push(out, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        let t = self.value(x);
        let out = t
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * s })
            .collect();
        let out = Tensor::from_vec(t.shape(), out);
        self.push(out, Op::LeakyRelu(x, s))
    }

    /// 2x2 average pooling, stride 2; odd trailing rows/columns form partial
    /// windows averaged over their valid samples.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, NnError> {
        let (c, h, w) = self.chw(x, "avg_pool2")?;
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = T::zero();
                    let mut n = 0;
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for xx in 2 * ox..(2 * ox + 2).min(w) {
                            s += xv[(ch * h + y) * w + xx];
                            n += 1;
                        }
                    }
                    out[(ch * ho + oy) * wo + ox] = s / T::from_f64(n as f64);
                }
            }
        }
        Ok(self.push(Tensor::from_vec(&[c, ho, wo], out), Op::AvgPool2(x)))
    }

    /// Global average pooling `(C, H, W) -> (C,)`.
    pub fn gap(&mut self, x: Var) -> Result<Var, NnError> {
        let (c, h, w) = self.chw(x, "global_avg_pool")?;
        let n = T::from_f64((h * w) as f64);
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / n)
            .collect();
        Ok(self.push(Tensor::from_vec(&[c], out), Op::Gap(x)))
    }

    /// Per-channel normalization over spatial positions with biased variance.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var, NnError> {
        let (c, h, w) = self.chw(x, "instance_norm")?;
        let hw = h * w;
        let nf = T::from_f64(hw as f64);
        let eps = T::from_f64(eps);
        let mut out = vec![T::zero(); c * hw];
        let mut inv_std = vec![T::zero(); c];
        for (ch, p) in self.value(x).data().chunks(hw).enumerate() {
            if p.iter().all(|&v| v == p[0]) {
                // exact zeros; the rounded mean would leave ulp-level residue
                inv_std[ch] = T::one() / eps.sqrt();
                continue;
            }
            let mean = p.iter().fold(T::zero(), |a, &v| a + v) / nf;
            let var = p.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for (o, &v) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(p) {
                *o = (v - mean) * is;
            }
        }
        Ok(self.push(Tensor::from_vec(&[c, h, w], out), Op::InstanceNorm { x, inv_std }))
    }

    /// Inverted dropout: each element is kept with probability `1 - p` and
    /// scaled by `1 / (1 - p)`. Only called in training; evaluation skips it.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var, NnError> {
        if !(0.0..1.0).contains(&p) {
            return Err(shape_err("dropout", format!("probability {p} outside [0, 1)")));
        }
        let scale = T::from_f64(1.0 / (1.0 - p));
        let t = self.value(x);
        let mask: Vec<T> = (0..t.len())
            .map(|_| if rng.random::<f64>() >= p { scale } else { T::zero() })
            .collect();
        let out = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_vec(t.shape(), out);
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    /// `(C r², H, W) -> (C, rH, rW)` with
    /// `out[c, h r + i, w r + j] = in[c r² + i r + j, h, w]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var, NnError> {
        let (cr, h, w) = self.chw(x, "pixel_shuffle")?;
        if r == 0 || cr % (r * r) != 0 {
            return Err(shape_err("pixel_shuffle", format!("{cr} channels, factor {r}")));
        }
        let c = cr / (r * r);
        let xv = self.value(x).data();
        let (oh, ow) = (h * r, w * r);
        let mut out = vec![T::zero(); c * oh * ow];
        for (src, &v) in xv.iter().enumerate() {
            let dst = shuffle_index(src, c, h, w, r);
            out[dst] = v;
        }
        let _ = (oh, ow);
        Ok(self.push(Tensor::from_vec(&[c, h * r, w * r], out), Op::PixelShuffle { x, r }))
    }

    /// Channel-wise affine modulation `alpha_c x + beta_c`; `x` has the
    /// channel as its leading dimension.
    pub fn gfm(&mut self, x: Var, alpha: Var, beta: Var) -> Result<Var, NnError> {
        let t = self.value(x);
        let c = t.shape().first().copied().unwrap_or(0);
        if self.value(alpha).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err(
                "gfm",
                format!(
                    "x {:?}, alpha {:?}, beta {:?}",
                    t.shape(),
                    self.value(alpha).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let per = t.len() / c.max(1);
        let (a, b) = (self.value(alpha).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(t.len());
        for (ch, p) in t.data().chunks(per.max(1)).enumerate() {
            out.extend(p.iter().map(|&v| a[ch] * v + b[ch]));
        }
        let out = Tensor::from_vec(t.shape(), out);
        Ok(self.push(out, Op::Gfm { x, alpha, beta }))
    }

    /// Element-wise spatial feature transform `m * x + n`.
    pub fn sft(&mut self, x: Var, m: Var, n: Var) -> Result<Var, NnError> {
        let s = self.value(x).shape();
        if self.value(m).shape() != s || self.value(n).shape() != s {
            return Err(shape_err("sft", "x, m and n shapes differ"));
        }
        let (xv, mv, nv) = (self.value(x).data(), self.value(m).data(), self.value(n).data());
        let out = (0..xv.len()).map(|i| mv[i] * xv[i] + nv[i]).collect();
        let out = Tensor::from_vec(s, out);
        Ok(self.push(out, Op::Sft { x, m, n }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let s = self.value(a).shape();
        if self.value(b).shape() != s {
            return Err(shape_err("add", format!("{:?} vs {:?}", s, self.value(b).shape())));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(s, out);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Concatenation along the leading (channel) dimension.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.is_empty() || sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(shape_err("concat", format!("{sa:?} vs {sb:?}")));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        Ok(self.push(Tensor::from_vec(&shape, out), Op::Concat(a, b)))
    }

    /// Slice `[start, start + len)` of the leading dimension.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let s = self.value(x).shape();
        if s.is_empty() || start + len > s[0] {
            return Err(shape_err("narrow", format!("[{start}, {}) of {s:?}", start + len)));
        }
        let per: usize = s[1..].iter().product();
        let mut shape = s.to_vec();
        shape[0] = len;
        let out = self.value(x).data()[start * per..(start + len) * per].to_vec();
        Ok(self.push(Tensor::from_vec(&shape, out), Op::Narrow { x, offset: start * per }))
    }

    /// Mirror-pad the bottom and right edges of a `(C, H, W)` tensor.
    pub fn pad_reflect(&mut self, x: Var, bottom: usize, right: usize) -> Result<Var, NnError> {
        let (c, h, w) = self.chw(x, "pad_reflect")?;
        if (bottom > 0 && bottom >= h.max(2)) || (right > 0 && right >= w.max(2)) {
            return Err(shape_err("pad_reflect", format!("pad ({bottom}, {right}) of {h}x{w}")));
        }
        let (oh, ow) = (h + bottom, w + right);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                let sy = reflect(y as isize, h);
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = xv[(ch * h + sy) * w + reflect(xx as isize, w)];
                }
            }
        }
        Ok(self.push(Tensor::from_vec(&[c, oh, ow], out), Op::PadReflect { x }))
    }

    /// Keep the top-left `h x w` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var, NnError> {
        let (c, ih, iw) = self.chw(x, "crop")?;
        if h > ih || w > iw {
            return Err(shape_err("crop", format!("{h}x{w} from {ih}x{iw}")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                out.extend_from_slice(&xv[(ch * ih + y) * iw..][..w]);
            }
        }
        Ok(self.push(Tensor::from_vec(&[c, h, w], out), Op::Crop { x }))
    }

    /// Mean absolute error, shape `(1,)`.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var, NnError> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() || p.is_empty() {
            return Err(shape_err("l1_loss", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        let s = p
            .data()
            .iter()
            .zip(t.data())
            .fold(T::zero(), |a, (&x, &y)| a + (x - y).abs());
        let v = s / T::from_f64(p.len() as f64);
        Ok(self.push(Tensor::from_vec(&[1], vec![v]), Op::L1 { pred, target }))
    }

    /// `sum(x * w)` against a constant tensor, shape `(1,)`.
    pub fn dot(&mut self, x: Var, w: Vec<T>) -> Result<Var, NnError> {
        if self.value(x).len() != w.len() {
            return Err(shape_err("dot", "length mismatch"));
        }
        let v = self
            .value(x)
            .data()
            .iter()
            .zip(&w)
            .fold(T::zero(), |a, (&x, &y)| a + x * y);
        Ok(self.push(Tensor::from_vec(&[1], vec![v]), Op::Dot { x, w }))
    }

    /// Signs of every input to a piecewise-linear op (ReLU, leaky ReLU, L1).
    /// Two evaluations with equal signatures lie on the same linear piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => {
                    sig.extend(self.value(*x).data().iter().map(|&v| v > T::zero()));
                }
                Op::L1 { pred, target } => sig.extend(
                    self.value(*pred)
                        .data()
                        .iter()
                        .zip(self.value(*target).data())
                        .map(|(&a, &b)| a > b),
                ),
                _ => {}
            }
        }
        sig
    }

    /// Reverse pass from a single-element node. Gradients of all nodes that
    /// depend on a parameter become available through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", "target must hold a single element"));
        }
        if !self.value(loss).is_finite() {
            return Err(NnError::NonFiniteLoss);
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
            let node = &self.nodes[i];
            for v in node.op.inputs() {
                if let Some(gi) = &self.grads[v.0] {
                    if gi.iter().any(|x| !x.is_finite()) {
                        return Err(NnError::NonFiniteGradient {
                            op: node.op.name(),
                            node: i,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].needs_grad;
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()])
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                k,
                stride,
                cols,
            } => {
                let (ci, h, wd) = val(*x).chw().unwrap();
                let (co, ho, wo) = nodes[i].value.chw().unwrap();
                let (k, stride) = (*k, *stride);
                let p = ho * wo;
                let kk = ci * k * k;
                let src = cols.as_deref().unwrap_or_else(|| val(*x).data());
                if wants(*w) {
                    let dw = buf!(*w);
                    T::gemm(
                        co,
                        p,
                        kk,
                        g,
                        (p as isize, 1),
                        src,
                        (1, p as isize),
                        T::one(),
                        dw,
                        (kk as isize, 1),
                    );
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let db = buf!(*b);
                        for (o, row) in g.chunks(p).enumerate() {
                            db[o] += row.iter().fold(T::zero(), |a, &v| a + v);
                        }
                    }
                }
                if wants(*x) {
                    let wv = val(*w).data();
                    if cols.is_none() {
                        let dx = buf!(*x);
                        T::gemm(
                            kk,
                            co,
                            p,
                            wv,
                            (1, kk as isize),
                            g,
                            (p as isize, 1),
                            T::one(),
                            dx,
                            (p as isize, 1),
                        );
                    } else {
                        let mut dcols = vec![T::zero(); kk * p];
                        T::gemm(
                            kk,
                            co,
                            p,
                            wv,
                            (1, kk as isize),
                            g,
                            (p as isize, 1),
                            T::zero(),
                            &mut dcols,
                            (p as isize, 1),
                        );
                        let pad = k / 2;
                        let dx = buf!(*x);
                        let taps = Taps::new(k, stride, h, wd, ho, wo);
                        for c in 0..ci {
                            let plane = &mut dx[c * h * wd..(c + 1) * h * wd];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let row = &dcols[((c * k + ky) * k + kx) * p..][..p];
                                    let xi = taps.col(kx);
                                    let (lo, hi) = taps.interior[kx];
                                    for oy in 0..ho {
                                        let sy = taps.rows[ky * ho + oy];
                                        let dst = &mut plane[sy * wd..(sy + 1) * wd];
                                        let src = &row[oy * wo..(oy + 1) * wo];
                                        if stride == 1 {
                                            for (d, &v) in
                                                dst[lo + kx - pad..hi + kx - pad].iter_mut().zip(&src[lo..hi])
                                            {
                                                *d += v;
                                            }
                                            for ox in (0..lo).chain(hi..wo) {
                                                dst[xi[ox]] += src[ox];
                                            }
                                        } else {
                                            for (&sx, &v) in xi.iter().zip(src) {
                                                dst[sx] += v;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let k = val(*x).len();
                if wants(*w) {
                    let xv = val(*x).data();
                    let dw = buf!(*w);
                    for (o, &gv) in g.iter().enumerate() {
                        for (d, &xv) in dw[o * k..(o + 1) * k].iter_mut().zip(xv) {
                            *d += gv * xv;
                        }
                    }
                }
                if let Some(b) = b {
                    if wants(*b) {
                        buf!(*b).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                    }
                }
                if wants(*x) {
                    let wv = val(*w).data();
                    let dx = buf!(*x);
                    for (o, &gv) in g.iter().enumerate() {
                        for (d, &w) in dx.iter_mut().zip(&wv[o * k..(o + 1) * k]) {
                            *d += gv * w;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = val(*x).data();
                    let dx = buf!(*x);
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::LeakyRelu(x, s) => {
                if wants(*x) {
                    let xv = val(*x).data();
                    let dx = buf!(*x);
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += if v > T::zero() { gv } else { gv * *s };
                    }
                }
            }
            Op::AvgPool2(x) => {
                if wants(*x) {
                    let (c, h, w) = val(*x).chw().unwrap();
                    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
                    let dx = buf!(*x);
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let ys = 2 * oy..(2 * oy + 2).min(h);
                                let xs = 2 * ox..(2 * ox + 2).min(w);
                                let n = T::from_f64((ys.len() * xs.len()) as f64);
                                let gv = g[(ch * ho + oy) * wo + ox] / n;
                                for y in ys {
                                    for xx in xs.clone() {
                                        dx[(ch * h + y) * w + xx] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Gap(x) => {
                if wants(*x) {
                    let (_, h, w) = val(*x).chw().unwrap();
                    let n = T::from_f64((h * w) as f64);
                    let dx = buf!(*x);
                    for (ch, p) in dx.chunks_mut(h * w).enumerate() {
                        let gv = g[ch] / n;
                        p.iter_mut().for_each(|d| *d += gv);
                    }
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                if wants(*x) {
                    let y = nodes[i].value.data();
                    let (_, h, w) = val(*x).chw().unwrap();
                    let hw = h * w;
                    let nf = T::from_f64(hw as f64);
                    let dx = buf!(*x);
                    for (ch, &is) in inv_std.iter().enumerate() {
                        let r = ch * hw..(ch + 1) * hw;
                        let (gp, yp) = (&g[r.clone()], &y[r.clone()]);
                        let mg = gp.iter().fold(T::zero(), |a, &v| a + v) / nf;
                        let mgy = gp.iter().zip(yp).fold(T::zero(), |a, (&g, &y)| a + g * y) / nf;
                        for ((d, &gv), &yv) in dx[r].iter_mut().zip(gp).zip(yp) {
                            *d += is * (gv - mg - yv * mgy);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if wants(*x) {
                    let dx = buf!(*x);
                    for ((d, &gv), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            Op::PixelShuffle { x, r } => {
                if wants(*x) {
                    let (c, oh, ow) = nodes[i].value.chw().unwrap();
                    let (h, w) = (oh / r, ow / r);
                    let dx = buf!(*x);
                    for (src, d) in dx.iter_mut().enumerate() {
                        *d += g[shuffle_index(src, c, h, w, *r)];
                    }
                }
            }
            Op::Gfm { x, alpha, beta } => {
                let c = val(*alpha).len();
                let per = g.len() / c.max(1);
                if wants(*x) {
                    let a = val(*alpha).data();
                    let dx = buf!(*x);
                    for (ch, (d, gp)) in dx.chunks_mut(per.max(1)).zip(g.chunks(per.max(1))).enumerate() {
                        d.iter_mut().zip(gp).for_each(|(d, &gv)| *d += a[ch] * gv);
                    }
                }
                if wants(*alpha) {
                    let xv = val(*x).data();
                    let da = buf!(*alpha);
                    for ch in 0..c {
                        let r = ch * per..(ch + 1) * per;
                        da[ch] += g[r.clone()].iter().zip(&xv[r]).fold(T::zero(), |a, (&g, &x)| a + g * x);
                    }
                }
                if wants(*beta) {
                    let db = buf!(*beta);
                    for ch in 0..c {
                        db[ch] += g[ch * per..(ch + 1) * per].iter().fold(T::zero(), |a, &v| a + v);
                    }
                }
            }
            Op::Sft { x, m, n } => {
                if wants(*x) {
                    let mv = val(*m).data();
                    let dx = buf!(*x);
                    for ((d, &gv), &mv) in dx.iter_mut().zip(g).zip(mv) {
                        *d += gv * mv;
                    }
                }
                if wants(*m) {
                    let xv = val(*x).data();
                    let dm = buf!(*m);
                    for ((d, &gv), &xv) in dm.iter_mut().zip(g).zip(xv) {
                        *d += gv * xv;
                    }
                }
                if wants(*n) {
                    buf!(*n).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        buf!(v).iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                    }
                }
            }
            Op::Concat(a, b) => {
                let na = val(*a).len();
                if wants(*a) {
                    buf!(*a).iter_mut().zip(&g[..na]).for_each(|(d, &gv)| *d += gv);
                }
                if wants(*b) {
                    buf!(*b).iter_mut().zip(&g[na..]).for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::Narrow { x, offset } => {
                if wants(*x) {
                    let dx = buf!(*x);
                    dx[*offset..*offset + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::PadReflect { x } => {
                if wants(*x) {
                    let (c, h, w) = val(*x).chw().unwrap();
                    let (_, oh, ow) = nodes[i].value.chw().unwrap();
                    let dx = buf!(*x);
                    for ch in 0..c {
                        for y in 0..oh {
                            let sy = reflect(y as isize, h);
                            for xx in 0..ow {
                                dx[(ch * h + sy) * w + reflect(xx as isize, w)] += g[(ch * oh + y) * ow + xx];
                            }
                        }
                    }
                }
            }
            Op::Crop { x } => {
                if wants(*x) {
                    let (c, _, iw) = val(*x).chw().unwrap();
                    let (_, h, w) = nodes[i].value.chw().unwrap();
                    let ih = val(*x).shape()[1];
                    let dx = buf!(*x);
                    for ch in 0..c {
                        for y in 0..h {
                            let d = &mut dx[(ch * ih + y) * iw..][..w];
                            d.iter_mut()
                                .zip(&g[(ch * h + y) * w..][..w])
                                .for_each(|(d, &gv)| *d += gv);
                        }
                    }
                }
            }
            Op::L1 { pred, target } => {
                let (p, t) = (val(*pred).data(), val(*target).data());
                let scale = g[0] / T::from_f64(p.len() as f64);
                let sign = |a: T, b: T| {
                    if a > b {
                        scale
                    } else if a < b {
                        -scale
                    } else {
                        T::zero()
                    }
                };
                if wants(*pred) {
                    let d = buf!(*pred);
                    for (j, dv) in d.iter_mut().enumerate() {
                        *dv += sign(p[j], t[j]);
                    }
                }
                if wants(*target) {
                    let d = buf!(*target);
                    for (j, dv) in d.iter_mut().enumerate() {
                        *dv -= sign(p[j], t[j]);
                    }
                }
            }
            Op::Dot { x, w } => {
                if wants(*x) {
                    buf!(*x).iter_mut().zip(w).for_each(|(d, &wv)| *d += g[0] * wv);
                }
            }
        }
    }
}

/// Destination index in the shuffled `(C, rH, rW)` output of source element
/// `src` of the `(C r², H, W)` input.
#[inline]
fn shuffle_index(src: usize, c: usize, h: usize, w: usize, r: usize) -> usize {
    let xx = src % w;
    let y = (src / w) % h;
    let cin = src / (w * h);
    let ch = cin / (r * r);
    let i = (cin % (r * r)) / r;
    let j = cin % r;
    debug_assert!(ch < c);
    (ch * h * r + y * r + i) * (w * r) + xx * r + j
}

/// Inverse of [`Graph::pixel_shuffle`]: `(C, rH, rW) -> (C r², H, W)`.
pub fn pixel_unshuffle<T: Scalar>(t: &Tensor<T>, r: usize) -> Result<Tensor<T>, NnError> {
    let (c, oh, ow) = t
        .chw()
        .ok_or_else(|| shape_err("pixel_unshuffle", "expected (C,H,W)"))?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(shape_err("pixel_unshuffle", format!("{oh}x{ow} not divisible by {r}")));
    }
    let (h, w) = (oh / r, ow / r);
    let out = (0..t.len())
        .map(|src| t.data()[shuffle_index(src, c, h, w, r)])
        .collect();
    Ok(Tensor::from_vec(&[c * r * r, h, w], out))
}
