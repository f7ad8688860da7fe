//! Local enhancement: a three-level U-shaped network whose residual blocks are
//! modulated by spatial feature transforms computed from the input, plus the
//! joint fine-tuning of the AGCM → LE composition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agcm::{agcm_graph, AgcmModel};
use crate::color::{ColorImage, ColorSpace, Domain, TransferFn};
use crate::data_io::ImagePair;
use crate::metrics::psnr;
use crate::nn::{kaiming_uniform, Checkpoint, Graph, NnError, ParamSet, Scalar, Tensor, Var};
use crate::train::{crop_tensor, fit, image_tensor, random_window, ModelError, TrainConfig, TrainSummary};

pub const CHECKPOINT_KIND: &str = "le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeConfig {
    /// Feature width of the top level; each lower level doubles it.
    pub channels: usize,
    /// Residual blocks per level, top to bottom.
    pub blocks: [usize; 3],
    pub leaky_slope: f64,
    pub output_space: ColorSpace,
    pub output_domain: Domain,
}

impl Default for LeConfig {
    fn default() -> Self {
        Self {
            channels: 24,
            blocks: [1, 2, 3],
            leaky_slope: 0.1,
            output_space: ColorSpace::Rec2020,
            output_domain: Domain::Encoded(TransferFn::Pq),
        }
    }
}

const RESIDUAL_INIT_SCALE: f32 = 0.1;

/// Condition heads in storage order: encoder top, encoder middle, bottom,
/// decoder middle, decoder top.
const HEAD_LEVELS: [usize; 5] = [0, 1, 2, 1, 0];

impl LeConfig {
    fn validate(&self) -> Result<(), ModelError> {
        if self.channels == 0 {
            return Err(ModelError::Config("LE needs at least one channel".into()));
        }
        if self.blocks[0] > self.blocks[1] || self.blocks[1] > self.blocks[2] {
            return Err(ModelError::Config(format!(
                "block counts must not decrease toward the bottom: {:?}",
                self.blocks
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.channels << level
    }

    /// Names and shapes of all parameters in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.channels;
        let mut v: Vec<(String, Vec<usize>)> = Vec::new();
        let mut conv = |v: &mut Vec<(String, Vec<usize>)>, name: String, o: usize, i: usize, k: usize| {
            v.push((format!("{name}.w"), vec![o, i, k, k]));
            v.push((format!("{name}.b"), vec![o]));
        };
        conv(&mut v, "head".into(), c, 3, 3);
        conv(&mut v, "cond.stem0".into(), c, 3, 3);
        conv(&mut v, "cond.stem1".into(), c, c, 3);
        conv(&mut v, "cond.stem2".into(), c, c, 3);
        conv(&mut v, "cond.down1".into(), 2 * c, c, 3);
        conv(&mut v, "cond.down2".into(), 4 * c, 2 * c, 3);
        for (h, &lvl) in HEAD_LEVELS.iter().enumerate() {
            let w = self.width(lvl);
            conv(&mut v, format!("cond.head{h}"), 2 * w, w, 1);
        }
        let block = |v: &mut Vec<(String, Vec<usize>)>,
                     conv: &mut dyn FnMut(&mut Vec<(String, Vec<usize>)>, String, usize, usize, usize),
                     name: String,
                     w: usize| {
            conv(v, format!("{name}.conv1"), w, w, 3);
            conv(v, format!("{name}.conv2"), w, w, 3);
        };
        for b in 0..self.blocks[0] {
            block(&mut v, &mut conv, format!("enc0.block{b}"), c);
        }
        conv(&mut v, "down1".into(), 2 * c, c, 3);
        for b in 0..self.blocks[1] {
            block(&mut v, &mut conv, format!("enc1.block{b}"), 2 * c);
        }
        conv(&mut v, "down2".into(), 4 * c, 2 * c, 3);
        for b in 0..self.blocks[2] {
            block(&mut v, &mut conv, format!("bottom.block{b}"), 4 * c);
        }
        conv(&mut v, "up2".into(), 8 * c, 4 * c, 1);
        conv(&mut v, "fuse1".into(), 2 * c, 4 * c, 1);
        for b in 0..self.blocks[1] {
            block(&mut v, &mut conv, format!("dec1.block{b}"), 2 * c);
        }
        conv(&mut v, "up1".into(), 4 * c, 2 * c, 1);
        conv(&mut v, "fuse0".into(), c, 2 * c, 1);
        for b in 0..self.blocks[0] {
            block(&mut v, &mut conv, format!("dec0.block{b}"), c);
        }
        conv(&mut v, "tail".into(), 3, c, 3);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeModel {
    pub config: LeConfig,
    pub params: ParamSet<f32>,
}

impl LeModel {
    /// Seeded He-uniform weights (the second conv of every residual block is
    /// scaled down); condition heads start at `m = 1`, `n = 0`
    /// and the tail at zero, so the untrained model is the identity.
    pub fn new(config: LeConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in config.layout() {
            let is_head = name.starts_with("cond.head");
            let t = if name.starts_with("tail") || (is_head && name.ends_with(".w")) {
                Tensor::zeros(&shape)
            } else if name.ends_with(".b") {
                let mut t = Tensor::zeros(&shape);
                if is_head {
                    let half = shape[0] / 2;
                    t.data_mut()[..half].iter_mut().for_each(|v| *v = 1.0);
                }
                t
            } else {
                let fan_in = shape[1..].iter().product();
                let mut t = kaiming_uniform(&shape, fan_in, config.leaky_slope, &mut rng);
                if name.ends_with("conv2.w") {
                    t.data_mut().iter_mut().for_each(|v| *v *= RESIDUAL_INIT_SCALE);
                }
                t
            };
            params.push(name, t);
        }
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, ModelError> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(ModelError::Kind {
                found: ck.kind,
                expected: CHECKPOINT_KIND,
            });
        }
        let config: LeConfig = serde_json::from_value(ck.config).map_err(NnError::from)?;
        config.validate()?;
        let layout = config.layout();
        let ok = layout.len() == ck.params.len()
            && layout
                .iter()
                .zip(ck.params.iter())
                .all(|((n, s), (pn, t))| n == pn && s.as_slice() == t.shape());
        if !ok {
            return Err(ModelError::Config(
                "checkpoint tensors do not match the model layout".into(),
            ));
        }
        Ok(Self {
            config,
            params: ck.params,
        })
    }

    /// Refines `x` (any size with both sides >= 8). Large images are processed
    /// in overlapping tiles.
    pub fn forward(&self, x: &ColorImage) -> Result<ColorImage, ModelError> {
        let (w, h) = (x.width(), x.height());
        if w < 8 || h < 8 {
            return Err(ModelError::Config(format!("LE input {w}x{h} is smaller than 8x8")));
        }
        let t = image_tensor(x);
        let out = if w * h <= TILE_DIRECT_LIMIT {
            self.forward_tensor(&t)?
        } else {
            self.forward_tiled(&t)?
        };
        let data = out.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(ColorImage::from_planes(
            w,
            h,
            data,
            self.config.output_space,
            self.config.output_domain,
        )?)
    }

    fn forward_tensor(&self, t: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        let mut g = Graph::<f32>::inference();
        let vars = self.params.bind(&mut g);
        let xi = g.input(t.clone());
        let y = le_graph(&mut g, &self.config, &vars, xi)?;
        Ok(g.take_value(y))
    }

    fn forward_tiled(&self, t: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        let (_, h, w) = t.chw().unwrap();
        let mut out = Tensor::zeros(&[3, h, w]);
        let mut y0 = 0;
        while y0 < h {
            let th = TILE_CORE.min(h - y0);
            let mut x0 = 0;
            while x0 < w {
                let tw = TILE_CORE.min(w - x0);
                let (ax, ay) = (x0.saturating_sub(TILE_MARGIN), y0.saturating_sub(TILE_MARGIN));
                let bx = (x0 + tw + TILE_MARGIN).min(w);
                let by = (y0 + th + TILE_MARGIN).min(h);
                let tile = crop_tensor(t, ax, ay, bx - ax, by - ay);
                let r = self.forward_tensor(&tile)?;
                let rw = bx - ax;
                let rh = by - ay;
                for c in 0..3 {
                    for y in 0..th {
                        let src = &r.data()[(c * rh + y + y0 - ay) * rw + x0 - ax..][..tw];
                        out.data_mut()[(c * h + y0 + y) * w + x0..][..tw].copy_from_slice(src);
                    }
                }
                x0 += tw;
            }
            y0 += th;
        }
        Ok(out)
    }
}

const TILE_DIRECT_LIMIT: usize = 384 * 384;
const TILE_CORE: usize = 256;
/// Multiple of 4 so tile origins keep the downsampling grid.
const TILE_MARGIN: usize = 64;

struct Cursor<'a> {
    vars: &'a [Var],
    at: usize,
}

impl Cursor<'_> {
    fn conv(&mut self) -> (Var, Var) {
        let r = (self.vars[self.at], self.vars[self.at + 1]);
        self.at += 2;
        r
    }
}

fn conv<T: Scalar>(g: &mut Graph<T>, x: Var, wb: (Var, Var), stride: usize) -> Result<Var, NnError> {
    g.conv2d(x, wb.0, Some(wb.1), stride)
}

fn res_block<T: Scalar>(
    g: &mut Graph<T>,
    cur: &mut Cursor,
    x: Var,
    mn: (Var, Var),
    slope: f64,
) -> Result<Var, NnError> {
    let c1 = cur.conv();
    let c2 = cur.conv();
    let h = conv(g, x, c1, 1)?;
    let h = g.sft(h, mn.0, mn.1)?;
    let h = g.leaky_relu(h, slope);
    let h = conv(g, h, c2, 1)?;
    g.add(x, h)
}

/// Differentiable LE on a `(3, H, W)` input with `H, W >= 8`; mirrors the
/// bottom/right edges to a multiple of 4 internally.
pub fn le_graph<T: Scalar>(g: &mut Graph<T>, cfg: &LeConfig, vars: &[Var], x: Var) -> Result<Var, NnError> {
    let (_, h, w) = g
        .value(x)
        .chw()
        .ok_or_else(|| NnError::Shape("le: expected (3,H,W)".into()))?;
    if h < 8 || w < 8 {
        return Err(NnError::Shape(format!("le: input {w}x{h} is smaller than 8x8")));
    }
    let (ph, pw) = ((4 - h % 4) % 4, (4 - w % 4) % 4);
    let xp = if ph + pw > 0 { g.pad_reflect(x, ph, pw)? } else { x };
    let slope = cfg.leaky_slope;
    let c = cfg.channels;
    let mut cur = Cursor { vars, at: 0 };
    let head = cur.conv();

    // condition branch
    let s0 = cur.conv();
    let s1 = cur.conv();
    let s2 = cur.conv();
    let d1 = cur.conv();
    let d2 = cur.conv();
    let mut f = conv(g, xp, s0, 1)?;
    f = g.leaky_relu(f, slope);
    f = conv(g, f, s1, 1)?;
    f = g.leaky_relu(f, slope);
    f = conv(g, f, s2, 1)?;
    let c0 = g.leaky_relu(f, slope);
    let c1 = conv(g, c0, d1, 2)?;
    let c1 = g.leaky_relu(c1, slope);
    let c2 = conv(g, c1, d2, 2)?;
    let c2 = g.leaky_relu(c2, slope);
    let feats = [c0, c1, c2];
    let mut conds = Vec::with_capacity(5);
    for &lvl in HEAD_LEVELS.iter() {
        let wb = cur.conv();
        let mn = conv(g, feats[lvl], wb, 1)?;
        let width = c << lvl;
        conds.push((g.narrow(mn, 0, width)?, g.narrow(mn, width, width)?));
    }

    // main branch
    let f0 = conv(g, xp, head, 1)?;
    let mut e0 = f0;
    for _ in 0..cfg.blocks[0] {
        e0 = res_block(g, &mut cur, e0, conds[0], slope)?;
    }
    let dn1 = cur.conv();
    let mut e1 = conv(g, e0, dn1, 2)?;
    for _ in 0..cfg.blocks[1] {
        e1 = res_block(g, &mut cur, e1, conds[1], slope)?;
    }
    let dn2 = cur.conv();
    let mut b = conv(g, e1, dn2, 2)?;
    for _ in 0..cfg.blocks[2] {
        b = res_block(g, &mut cur, b, conds[2], slope)?;
    }
    let up2 = cur.conv();
    let fuse1 = cur.conv();
    let u = conv(g, b, up2, 1)?;
    let u = g.pixel_shuffle(u, 2)?;
    let u = g.concat(u, e1)?;
    let mut d = conv(g, u, fuse1, 1)?;
    for _ in 0..cfg.blocks[1] {
        d = res_block(g, &mut cur, d, conds[3], slope)?;
    }
    let up1 = cur.conv();
    let fuse0 = cur.conv();
    let u = conv(g, d, up1, 1)?;
    let u = g.pixel_shuffle(u, 2)?;
    let u = g.concat(u, e0)?;
    let mut d = conv(g, u, fuse0, 1)?;
    for _ in 0..cfg.blocks[0] {
        d = res_block(g, &mut cur, d, conds[4], slope)?;
    }
    let tail = cur.conv();
    let r = conv(g, d, tail, 1)?;
    debug_assert_eq!(cur.at, vars.len());
    let y = g.add(xp, r)?;
    if ph + pw > 0 {
        g.crop(y, h, w)
    } else {
        Ok(y)
    }
}

/// Mean PSNR of `LE(input)` against the targets.
pub fn evaluate_psnr(model: &LeModel, inputs: &[ColorImage], targets: &[ColorImage]) -> Result<f64, ModelError> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(ModelError::EmptyDataset);
    }
    let mut s = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        s += psnr(&model.forward(x)?, t, 1.0)?.min(100.0);
    }
    Ok(s / inputs.len() as f64)
}

/// L1 training of LE on `(input, target)` images of equal size, e.g. AGCM
/// outputs paired with HDR references.
pub fn train_le(
    mut model: LeModel,
    train: &[(ColorImage, ColorImage)],
    val: &[(ColorImage, ColorImage)],
    cfg: &TrainConfig,
) -> Result<(LeModel, TrainSummary), ModelError> {
    if train.is_empty() || val.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if cfg.patch < 8 {
        return Err(ModelError::Config("LE patches must be at least 8 pixels".into()));
    }
    model.config.output_space = train[0].1.space;
    model.config.output_domain = train[0].1.domain;
    let tensors: Vec<(Tensor<f32>, Tensor<f32>)> =
        train.iter().map(|(x, t)| (image_tensor(x), image_tensor(t))).collect();
    let (vx, vt): (Vec<ColorImage>, Vec<ColorImage>) = val.iter().cloned().unzip();
    let mcfg = model.config.clone();
    let mut params = std::mem::take(&mut model.params);
    let mut pick = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1e);
    let summary = fit(
        &mut params,
        cfg,
        |p, rng, scale| {
            let (x, t) = &tensors[rand::Rng::random_range(&mut pick, 0..tensors.len())];
            let (_, h, w) = x.chw().unwrap();
            let (x0, y0, pw, ph) = random_window(rng, w, h, cfg.patch);
            let mut g = Graph::new();
            let vars = p.bind(&mut g);
            let xi = g.input(crop_tensor(x, x0, y0, pw, ph));
            let ti = g.input(crop_tensor(t, x0, y0, pw, ph));
            let y = le_graph(&mut g, &mcfg, &vars, xi)?;
            let l = g.l1_loss(y, ti)?;
            g.backward(l)?;
            p.accumulate_grads(&g, &vars, scale);
            Ok(g.value(l).data()[0].as_f64())
        },
        |p| {
            let m = LeModel {
                config: mcfg.clone(),
                params: p.clone(),
            };
            evaluate_psnr(&m, &vx, &vt)
        },
    )?;
    model.params = params;
    Ok((model, summary))
}

/// Mean PSNR of `LE(AGCM(sdr))` against the HDR references.
pub fn evaluate_joint(agcm: &AgcmModel, le: &LeModel, pairs: &[ImagePair]) -> Result<f64, ModelError> {
    if pairs.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut s = 0.0;
    for p in pairs {
        let out = le.forward(&agcm.forward(&p.sdr, None)?)?;
        s += psnr(&out, &p.hdr, 1.0)?.min(100.0);
    }
    Ok(s / pairs.len() as f64)
}

fn combined(agcm: &AgcmModel, le: &LeModel) -> ParamSet<f32> {
    let mut ps = ParamSet::new();
    for (n, t) in agcm.params.iter() {
        ps.push(format!("agcm.{n}"), t.clone());
    }
    for (n, t) in le.params.iter() {
        ps.push(format!("le.{n}"), t.clone());
    }
    ps
}

fn split(ps: &ParamSet<f32>, agcm: &mut AgcmModel, le: &mut LeModel) {
    let n = agcm.params.len();
    for i in 0..ps.len() {
        let src = ps.get(i).data();
        let dst = if i < n {
            agcm.params.get_mut(i)
        } else {
            le.params.get_mut(i - n)
        };
        dst.data_mut().copy_from_slice(src);
    }
}

/// One end-to-end sample of the composition; returns the loss and leaves
/// the gradients of both models in `params` (AGCM tensors first).
pub(crate) fn joint_step(
    agcm: &AgcmModel,
    le: &LeModel,
    params: &mut ParamSet<f32>,
    sample: &crate::agcm::AgcmSample,
    patch: usize,
    rng: &mut ChaCha8Rng,
    scale: f32,
) -> Result<f64, NnError> {
    let (_, h, w) = sample.sdr.chw().unwrap();
    let (x0, y0, pw, ph) = random_window(rng, w, h, patch);
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let na = agcm.params.len();
    let x = g.input(crop_tensor(&sample.sdr, x0, y0, pw, ph));
    let t = g.input(crop_tensor(&sample.hdr, x0, y0, pw, ph));
    let c = agcm.config.use_condition.then(|| g.input(sample.cond.clone()));
    let mid = agcm_graph(&mut g, &agcm.config, &vars[..na], x, c, Some(rng))?;
    let y = le_graph(&mut g, &le.config, &vars[na..], mid)?;
    let l = g.l1_loss(y, t)?;
    g.backward(l)?;
    params.accumulate_grads(&g, &vars, scale);
    Ok(g.value(l).data()[0].as_f64())
}

/// End-to-end L1 fine-tuning of `LE(AGCM(x))`; both models are updated.
pub fn joint_finetune(
    agcm: AgcmModel,
    le: LeModel,
    train: &[ImagePair],
    val: &[ImagePair],
    cfg: &TrainConfig,
) -> Result<(AgcmModel, LeModel, TrainSummary), ModelError> {
    if train.is_empty() || val.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let samples = crate::agcm::prepare_samples(&agcm, train)?;
    let mut params = combined(&agcm, &le);
    let (mut a, mut l) = (agcm, le);
    let (a0, l0) = (a.clone(), l.clone());
    let mut pick = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x301);
    let summary = fit(
        &mut params,
        cfg,
        |p, rng, scale| {
            let i = rand::Rng::random_range(&mut pick, 0..samples.len());
            joint_step(&a0, &l0, p, &samples[i], cfg.patch, rng, scale)
        },
        |p| {
            let (mut am, mut lm) = (a0.clone(), l0.clone());
            split(p, &mut am, &mut lm);
            evaluate_joint(&am, &lm, val)
        },
    )?;
    split(&params, &mut a, &mut l);
    Ok((a, l, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agcm::{prepare_samples, AgcmConfig};
    use crate::formation::{synthetic_pairs, SyntheticSpec, SyntheticTask};
    use crate::nn::{grad_check, Adam, GradCheckOptions};
    use rand::Rng;

    fn small() -> LeConfig {
        LeConfig {
            channels: 4,
            blocks: [1, 1, 2],
            ..LeConfig::default()
        }
    }

    fn image(w: usize, h: usize, seed: u64) -> ColorImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = (0..3 * w * h).map(|_| rng.random()).collect();
        ColorImage::from_planes(w, h, d, ColorSpace::Rec2020, Domain::Encoded(TransferFn::Pq)).unwrap()
    }

    fn perturb_tail(m: &mut LeModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let i = m.params.index_of("tail.w").unwrap();
        m.params
            .get_mut(i)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.05..0.05));
    }

    #[test]
    fn parameter_count() {
        let m = LeModel::new(LeConfig::default(), 0).unwrap();
        assert_eq!(
            m.param_count(),
            m.config
                .layout()
                .iter()
                .map(|(_, s)| s.iter().product::<usize>())
                .sum::<usize>()
        );
        assert!(
            m.param_count() > 300_000 && m.param_count() < 1_000_000,
            "{}",
            m.param_count()
        );
        assert!(LeModel::new(
            LeConfig {
                blocks: [2, 1, 3],
                ..LeConfig::default()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn identity_at_init_and_shapes() {
        let m = LeModel::new(small(), 1).unwrap();
        let img = image(97, 131, 2);
        let out = m.forward(&img).unwrap();
        assert_eq!((out.width(), out.height()), (97, 131));
        assert_eq!(out.data(), img.data());
        for (w, h) in [(8, 8), (9, 15), (33, 10)] {
            let x = image(w, h, 3);
            let mut pm = m.clone();
            perturb_tail(&mut pm, 4);
            let y = pm.forward(&x).unwrap();
            assert_eq!((y.width(), y.height()), (w, h));
            assert!(y.data().iter().all(|v| v.is_finite()));
        }
        assert!(m.forward(&image(7, 20, 5)).is_err());
    }

    #[test]
    fn neighborhood_dependence() {
        let mut m = LeModel::new(small(), 6).unwrap();
        perturb_tail(&mut m, 7);
        let base = ColorImage::from_fn(32, 32, ColorSpace::Rec2020, Domain::Encoded(TransferFn::Pq), |_, _| {
            [0.3; 3]
        });
        let mut probe = base.clone();
        probe.set_pixel(16, 16, [1.0; 3]);
        let (a, b) = (m.forward(&base).unwrap(), m.forward(&probe).unwrap());
        let changed = (0..32 * 32)
            .filter(|&i| (0..3).any(|c| a.plane(c)[i] != b.plane(c)[i]))
            .count();
        assert!(changed > 9, "{changed}");
    }

    #[test]
    fn tiled_matches_direct() {
        let mut m = LeModel::new(small(), 8).unwrap();
        perturb_tail(&mut m, 9);
        let img = image(300, 140, 10);
        let t = image_tensor(&img);
        let direct = m.forward_tensor(&t).unwrap();
        let tiled = m.forward_tiled(&t).unwrap();
        let max = direct
            .data()
            .iter()
            .zip(tiled.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max < 1e-3, "{max}");
    }

    #[test]
    fn le_gradcheck() {
        let cfg = LeConfig {
            channels: 2,
            blocks: [1, 1, 1],
            ..LeConfig::default()
        };
        let m = LeModel::new(cfg.clone(), 11).unwrap();
        let mut ps = m.params.cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for i in 0..ps.len() {
            ps.get_mut(i)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
        let x: Tensor<f64> = Tensor::from_vec(&[3, 9, 10], (0..270).map(|_| rng.random()).collect());
        let probe: Vec<f64> = (0..270).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = grad_check(
            &ps,
            |g, vars| {
                let xi = g.input(x.clone());
                let y = le_graph(g, &cfg, vars, xi)?;
                g.dot(y, probe.clone())
            },
            GradCheckOptions {
                samples: 64,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.checked >= 32 && r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = LeModel::new(small(), 13).unwrap();
        assert_eq!(LeModel::from_checkpoint(m.to_checkpoint()).unwrap(), m);
    }

    #[test]
    fn joint_step_reaches_first_agcm_layer_and_zero_lr_is_noop() {
        let pairs = synthetic_pairs(&SyntheticSpec::new(SyntheticTask::Global, 1, 64, 64, 3)).unwrap();
        let agcm = AgcmModel::new(AgcmConfig::default(), 14).unwrap();
        let mut le = LeModel::new(small(), 15).unwrap();
        perturb_tail(&mut le, 16);
        let samples = prepare_samples(&agcm, &pairs).unwrap();
        let mut ps = combined(&agcm, &le);
        ps.zero_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        joint_step(&agcm, &le, &mut ps, &samples[0], 32, &mut rng, 1.0).unwrap();
        let g0 = ps.get(0).grad.as_ref().unwrap();
        assert_eq!(ps.name(0), "agcm.base.0.w");
        assert!(g0.iter().map(|v| v * v).sum::<f32>() > 0.0);
        let before = ps.clone();
        let mut adam = Adam::new(0.0);
        adam.step(&mut ps).unwrap();
        for i in 0..ps.len() {
            assert_eq!(ps.get(i).data(), before.get(i).data());
        }

        let cfg = TrainConfig {
            iterations: 1,
            batch: 1,
            patch: 32,
            lr: 0.0,
            val_every: 1,
            ..Default::default()
        };
        let (a2, l2, _) = joint_finetune(agcm.clone(), le.clone(), &pairs, &pairs, &cfg).unwrap();
        assert_eq!(a2.params, agcm.params);
        assert_eq!(l2.params, le.params);
    }

    #[test]
    fn short_training_reduces_loss() {
        let pairs = synthetic_pairs(&SyntheticSpec::new(SyntheticTask::Local, 2, 48, 48, 4)).unwrap();
        let data: Vec<(ColorImage, ColorImage)> = pairs
            .iter()
            .map(|p| (crate::formation::ldr2hdr_baseline(&p.sdr).unwrap(), p.hdr.clone()))
            .collect();
        let m = LeModel::new(small(), 18).unwrap();
        let (xs, ts): (Vec<_>, Vec<_>) = data.iter().cloned().unzip();
        let before = evaluate_psnr(&m, &xs, &ts).unwrap();
        let cfg = TrainConfig {
            iterations: 30,
            batch: 2,
            patch: 24,
            lr: 1e-3,
            val_every: 10,
            ..Default::default()
        };
        let (trained, _) = train_le(m, &data, &data, &cfg).unwrap();
        let after = evaluate_psnr(&trained, &xs, &ts).unwrap();
        assert!(after > before, "{before} -> {after}");
    }
}
