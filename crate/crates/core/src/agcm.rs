//! Adaptive global color mapping: a per-pixel base network (1x1 convolutions)
//! whose layers are modulated channel-wise by a condition vector extracted
//! from a downsampled copy of the whole input image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::{ColorImage, ColorSpace, Domain, TransferFn};
use crate::data_io::{downsample_box, ImagePair};
use crate::metrics::psnr;
use crate::nn::{kaiming_uniform, Checkpoint, Graph, NnError, ParamSet, Scalar, Tensor, Var};
use crate::train::{crop_tensor, fit, image_tensor, random_window, ModelError, TrainConfig, TrainSummary};

pub const CHECKPOINT_KIND: &str = "agcm";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgcmConfig {
    /// Hidden width of the base network.
    pub base_width: usize,
    /// Number of 1x1 layers in the base network.
    pub base_layers: usize,
    /// Output widths of the color condition blocks.
    pub cond_widths: Vec<usize>,
    /// Length of the condition vector.
    pub cond_dim: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub in_eps: f64,
    /// Without the condition branch the model is the plain base network.
    pub use_condition: bool,
    /// Box-downsampling factor of the condition input.
    pub cond_downsample: usize,
    /// Tags of the produced images.
    pub output_space: ColorSpace,
    pub output_domain: Domain,
}

impl Default for AgcmConfig {
    fn default() -> Self {
        Self {
            base_width: 64,
            base_layers: 3,
            cond_widths: vec![16, 32, 64, 128],
            cond_dim: 48,
            dropout: 0.5,
            leaky_slope: 0.1,
            in_eps: 1e-5,
            use_condition: true,
            cond_downsample: 4,
            output_space: ColorSpace::Rec2020,
            output_domain: Domain::Encoded(TransferFn::Pq),
        }
    }
}

impl AgcmConfig {
    pub fn base_only() -> Self {
        Self {
            use_condition: false,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.base_layers == 0 || self.base_width == 0 {
            return Err(ModelError::Config("base network needs at least one layer".into()));
        }
        if self.use_condition && (self.cond_widths.is_empty() || self.cond_dim == 0) {
            return Err(ModelError::Config(
                "condition branch needs blocks and a vector size".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.cond_downsample == 0 {
            return Err(ModelError::Config(
                "dropout in [0,1) and a positive downsample factor".into(),
            ));
        }
        Ok(())
    }

    /// Channel counts `(in, out)` of each base layer.
    fn base_dims(&self) -> Vec<(usize, usize)> {
        (0..self.base_layers)
            .map(|l| {
                let i = if l == 0 { 3 } else { self.base_width };
                let o = if l + 1 == self.base_layers { 3 } else { self.base_width };
                (i, o)
            })
            .collect()
    }

    /// Smallest side the condition input may have: every normalized block
    /// must leave at least a 2x2 map.
    pub fn min_condition_side(&self) -> usize {
        1 << self.cond_widths.len()
    }

    /// Names and shapes of all parameters in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        for (l, (i, o)) in self.base_dims().into_iter().enumerate() {
            v.push((format!("base.{l}.w"), vec![o, i, 1, 1]));
            v.push((format!("base.{l}.b"), vec![o]));
        }
        if self.use_condition {
            let mut cin = 3;
            for (k, &w) in self.cond_widths.iter().enumerate() {
                v.push((format!("cond.ccb{k}.w"), vec![w, cin, 1, 1]));
                v.push((format!("cond.ccb{k}.b"), vec![w]));
                cin = w;
            }
            v.push(("cond.out.w".into(), vec![self.cond_dim, cin, 1, 1]));
            v.push(("cond.out.b".into(), vec![self.cond_dim]));
            for (l, (_, o)) in self.base_dims().into_iter().enumerate() {
                v.push((format!("gfm.{l}.w"), vec![2 * o, self.cond_dim]));
                v.push((format!("gfm.{l}.b"), vec![2 * o]));
            }
        }
        v
    }
}

/// Global condition vector `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector(pub Vec<f32>);

#[derive(Debug, Clone, PartialEq)]
pub struct AgcmModel {
    pub config: AgcmConfig,
    pub params: ParamSet<f32>,
}

fn head_init(params: &mut ParamSet<f32>, cfg: &AgcmConfig) {
    if !cfg.use_condition {
        return;
    }
    for (l, (_, o)) in cfg.base_dims().into_iter().enumerate() {
        let wi = params.index_of(&format!("gfm.{l}.w")).unwrap();
        params.get_mut(wi).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let bi = params.index_of(&format!("gfm.{l}.b")).unwrap();
        let b = params.get_mut(bi).data_mut();
        b[..o].iter_mut().for_each(|v| *v = 1.0);
        b[o..].iter_mut().for_each(|v| *v = 0.0);
    }
}

impl AgcmModel {
    /// Seeded He-uniform weights, zero biases; modulation heads start at
    /// `alpha = 1`, `beta = 0`.
    pub fn new(config: AgcmConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in config.layout() {
            let t = if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let fan_in = shape[1..].iter().product();
                let slope = if name.starts_with("cond.") {
                    config.leaky_slope
                } else {
                    0.0
                };
                kaiming_uniform(&shape, fan_in, slope, &mut rng)
            };
            params.push(name, t);
        }
        head_init(&mut params, &config);
        Ok(Self { config, params })
    }

    /// Model whose output equals its input on `[0, 1]`: the base network
    /// passes the three input channels through identity blocks.
    pub fn identity(config: AgcmConfig, seed: u64) -> Result<Self, ModelError> {
        let mut m = Self::new(config, seed)?;
        for (l, (i, o)) in m.config.base_dims().into_iter().enumerate() {
            let wi = m.params.index_of(&format!("base.{l}.w")).unwrap();
            let w = m.params.get_mut(wi).data_mut();
            w.iter_mut().for_each(|v| *v = 0.0);
            for d in 0..i.min(o) {
                w[d * i + d] = 1.0;
            }
        }
        Ok(m)
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
        let config: AgcmConfig = serde_json::from_value(ck.config).map_err(NnError::from)?;
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

    /// Downsampled copy of `sdr` fed to the condition branch.
    pub fn condition_input(&self, sdr: &ColorImage) -> Result<ColorImage, ModelError> {
        Ok(downsample_box(sdr, self.config.cond_downsample)?)
    }

    /// Condition vector of an already downsampled image (evaluation mode).
    pub fn condition_from_small(&self, small: &ColorImage) -> Result<ConditionVector, ModelError> {
        if !self.config.use_condition {
            return Err(ModelError::Config("model has no condition branch".into()));
        }
        let mut g = Graph::<f32>::inference();
        let vars = self.params.bind(&mut g);
        let x = g.input(image_tensor(small));
        let v = condition_graph(&mut g, &self.config, &vars, x, None)?;
        Ok(ConditionVector(g.value(v).data().to_vec()))
    }

    /// Condition vector of a full-resolution image.
    pub fn condition_vector(&self, sdr: &ColorImage) -> Result<ConditionVector, ModelError> {
        self.condition_from_small(&self.condition_input(sdr)?)
    }

    /// Per-pixel function `f(. | V)`. `v` is ignored by base-only models and
    /// required otherwise.
    pub fn pixel_mapper(&self, v: Option<&ConditionVector>) -> Result<PixelMapper, ModelError> {
        let cfg = &self.config;
        let mods: Vec<(Vec<f32>, Vec<f32>)> = if cfg.use_condition {
            let v = v.ok_or_else(|| ModelError::Config("condition vector required".into()))?;
            if v.0.len() != cfg.cond_dim {
                return Err(ModelError::Config(format!(
                    "condition vector has {} entries, expected {}",
                    v.0.len(),
                    cfg.cond_dim
                )));
            }
            let mut g = Graph::<f32>::inference();
            let vars = self.params.bind(&mut g);
            let vv = g.input(Tensor::from_vec(&[cfg.cond_dim], v.0.clone()));
            let mut out = Vec::new();
            for (l, (_, o)) in cfg.base_dims().into_iter().enumerate() {
                let (w, b) = head_vars(cfg, &vars, l);
                let ab = g.linear(vv, w, Some(b))?;
                let d = g.value(ab).data();
                out.push((d[..o].to_vec(), d[o..].to_vec()));
            }
            out
        } else {
            cfg.base_dims()
                .iter()
                .map(|&(_, o)| (vec![1.0; o], vec![0.0; o]))
                .collect()
        };
        let layers = cfg
            .base_dims()
            .into_iter()
            .enumerate()
            .map(|(l, (i, o))| {
                let w = self.params.get(2 * l).data();
                let b = self.params.get(2 * l + 1).data();
                let (alpha, beta) = &mods[l];
                // transposed so the inner loop runs over outputs
                let mut wt = vec![0.0f32; i * o];
                for oo in 0..o {
                    for ii in 0..i {
                        wt[ii * o + oo] = alpha[oo] * w[oo * i + ii];
                    }
                }
                let bias = (0..o).map(|oo| alpha[oo] * b[oo] + beta[oo]).collect();
                MapperLayer {
                    inputs: i,
                    outputs: o,
                    wt,
                    bias,
                }
            })
            .collect();
        Ok(PixelMapper {
            layers,
            output_space: cfg.output_space,
            output_domain: cfg.output_domain,
        })
    }

    /// Full inference: derives `V` from `sdr` unless one is given, then maps
    /// every pixel. Output is clamped to `[0, 1]`.
    pub fn forward(&self, sdr: &ColorImage, v: Option<&ConditionVector>) -> Result<ColorImage, ModelError> {
        let own;
        let v = match (self.config.use_condition, v) {
            (true, None) => {
                own = self.condition_vector(sdr)?;
                Some(&own)
            }
            (_, v) => v,
        };
        Ok(self.pixel_mapper(v)?.apply(sdr))
    }
}

#[derive(Debug, Clone)]
struct MapperLayer {
    inputs: usize,
    outputs: usize,
    /// `inputs x outputs`, modulation folded in.
    wt: Vec<f32>,
    bias: Vec<f32>,
}

/// The base network with a frozen condition: a fixed function of one pixel.
#[derive(Debug, Clone)]
pub struct PixelMapper {
    layers: Vec<MapperLayer>,
    output_space: ColorSpace,
    output_domain: Domain,
}

impl PixelMapper {
    /// Unclamped network output.
    pub fn map_raw(&self, rgb: [f32; 3]) -> [f32; 3] {
        let mut cur: Vec<f32> = rgb.to_vec();
        let n = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut next = layer.bias.clone();
            for ii in 0..layer.inputs {
                let x = cur[ii];
                let row = &layer.wt[ii * layer.outputs..(ii + 1) * layer.outputs];
                for (y, &w) in next.iter_mut().zip(row) {
                    *y += w * x;
                }
            }
            if l + 1 < n {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            cur = next;
        }
        [cur[0], cur[1], cur[2]]
    }

    pub fn output_space(&self) -> ColorSpace {
        self.output_space
    }

    pub fn output_domain(&self) -> Domain {
        self.output_domain
    }

    pub fn map(&self, rgb: [f32; 3]) -> [f32; 3] {
        self.map_raw(rgb).map(|v| v.clamp(0.0, 1.0))
    }

    /// Maps every pixel (row-parallel); the result carries the model's
    /// output tags.
    pub fn apply(&self, img: &ColorImage) -> ColorImage {
        let (w, h) = (img.width(), img.height());
        let n = w * h;
        let src = img.data();
        let rows: Vec<Vec<[f32; 3]>> = (0..h)
            .into_par_iter()
            .map(|y| {
                (0..w)
                    .map(|x| {
                        let i = y * w + x;
                        self.map([src[i], src[n + i], src[2 * n + i]])
                    })
                    .collect()
            })
            .collect();
        let mut out = vec![0.0f32; 3 * n];
        for (y, row) in rows.iter().enumerate() {
            for (x, p) in row.iter().enumerate() {
                for c in 0..3 {
                    out[c * n + y * w + x] = p[c];
                }
            }
        }
        ColorImage::from_planes(w, h, out, self.output_space, self.output_domain).expect("clamped finite output")
    }
}

fn head_vars(cfg: &AgcmConfig, vars: &[Var], l: usize) -> (Var, Var) {
    let base = 2 * cfg.base_layers + 2 * (cfg.cond_widths.len() + 1);
    (vars[base + 2 * l], vars[base + 2 * l + 1])
}

/// One color condition block: conv1x1, 2x2 average pool, leaky ReLU and,
/// when `normalize`, instance normalization.
pub fn ccb_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    b: Var,
    slope: f64,
    eps: f64,
    normalize: bool,
) -> Result<Var, NnError> {
    let (_, h, wd) = g
        .value(x)
        .chw()
        .ok_or_else(|| NnError::Shape("ccb: expected (C,H,W)".into()))?;
    if h < 2 || wd < 2 {
        return Err(NnError::Shape(format!("ccb: input {h}x{wd} is smaller than 2x2")));
    }
    let y = g.conv2d(x, w, Some(b), 1)?;
    let y = g.avg_pool2(y)?;
    let y = g.leaky_relu(y, slope);
    if normalize {
        g.instance_norm(y, eps)
    } else {
        Ok(y)
    }
}

/// Condition branch. Every block but the last is instance-normalized; with
/// normalization after the last block the pooled linear read-out would be
/// the constant bias. Dropout is applied only when `rng` is given.
pub fn condition_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &AgcmConfig,
    vars: &[Var],
    x: Var,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var, NnError> {
    let (_, h, w) = g
        .value(x)
        .chw()
        .ok_or_else(|| NnError::Shape("condition: expected (C,H,W)".into()))?;
    let min = cfg.min_condition_side();
    if h < min || w < min {
        return Err(NnError::Shape(format!(
            "condition input {w}x{h} is smaller than {min}x{min}"
        )));
    }
    let off = 2 * cfg.base_layers;
    let nb = cfg.cond_widths.len();
    let mut f = x;
    for k in 0..nb {
        f = ccb_forward(
            g,
            f,
            vars[off + 2 * k],
            vars[off + 2 * k + 1],
            cfg.leaky_slope,
            cfg.in_eps,
            k + 1 < nb,
        )?;
    }
    if let Some(rng) = rng {
        if cfg.dropout > 0.0 {
            f = g.dropout(f, cfg.dropout, rng)?;
        }
    }
    let f = g.conv2d(f, vars[off + 2 * nb], Some(vars[off + 2 * nb + 1]), 1)?;
    g.gap(f)
}

/// Base network on a `(3, H, W)` input, modulated by `v` when present.
pub fn base_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &AgcmConfig,
    vars: &[Var],
    x: Var,
    v: Option<Var>,
) -> Result<Var, NnError> {
    let mut h = x;
    for (l, (_, o)) in cfg.base_dims().into_iter().enumerate() {
        h = g.conv2d(h, vars[2 * l], Some(vars[2 * l + 1]), 1)?;
        if let Some(v) = v {
            let (w, b) = head_vars(cfg, vars, l);
            let ab = g.linear(v, w, Some(b))?;
            let alpha = g.narrow(ab, 0, o)?;
            let beta = g.narrow(ab, o, o)?;
            h = g.gfm(h, alpha, beta)?;
        }
        if l + 1 < cfg.base_layers {
            h = g.relu(h);
        }
    }
    Ok(h)
}

/// Complete differentiable model (unclamped output).
pub fn agcm_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &AgcmConfig,
    vars: &[Var],
    x: Var,
    cond: Option<Var>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var, NnError> {
    let v = match (cfg.use_condition, cond) {
        (true, Some(c)) => Some(condition_graph(g, cfg, vars, c, rng)?),
        (true, None) => return Err(NnError::Shape("condition input missing".into())),
        (false, _) => None,
    };
    base_graph(g, cfg, vars, x, v)
}

/// Pre-converted training pair.
#[derive(Debug, Clone)]
pub struct AgcmSample {
    pub sdr: Tensor<f32>,
    pub hdr: Tensor<f32>,
    pub cond: Tensor<f32>,
}

pub fn prepare_samples(model: &AgcmModel, pairs: &[ImagePair]) -> Result<Vec<AgcmSample>, ModelError> {
    pairs
        .iter()
        .map(|p| {
            Ok(AgcmSample {
                sdr: image_tensor(&p.sdr),
                hdr: image_tensor(&p.hdr),
                cond: image_tensor(&model.condition_input(&p.sdr)?),
            })
        })
        .collect()
}

/// Mean PSNR of the model on full images.
pub fn evaluate_psnr(model: &AgcmModel, pairs: &[ImagePair]) -> Result<f64, ModelError> {
    if pairs.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut s = 0.0;
    for p in pairs {
        let out = model.forward(&p.sdr, None)?;
        s += psnr(&out, &p.hdr, 1.0)?.min(100.0);
    }
    Ok(s / pairs.len() as f64)
}

/// Mean L1 error of the (clamped) model output over whole images.
pub fn evaluate_l1(model: &AgcmModel, pairs: &[ImagePair]) -> Result<f64, ModelError> {
    if pairs.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut s = 0.0;
    for p in pairs {
        let out = model.forward(&p.sdr, None)?;
        let e: f64 = out
            .data()
            .iter()
            .zip(p.hdr.data())
            .map(|(&a, &b)| (a - b).abs() as f64)
            .sum();
        s += e / out.data().len() as f64;
    }
    Ok(s / pairs.len() as f64)
}

/// One sample's loss and gradient; the crop position and dropout mask come
/// from `rng`.
pub(crate) fn agcm_step(
    cfg: &AgcmConfig,
    params: &mut ParamSet<f32>,
    sample: &AgcmSample,
    patch: usize,
    rng: &mut ChaCha8Rng,
    scale: f32,
) -> Result<f64, NnError> {
    let (_, h, w) = sample.sdr.chw().unwrap();
    let (x0, y0, pw, ph) = random_window(rng, w, h, patch);
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let x = g.input(crop_tensor(&sample.sdr, x0, y0, pw, ph));
    let t = g.input(crop_tensor(&sample.hdr, x0, y0, pw, ph));
    let c = cfg.use_condition.then(|| g.input(sample.cond.clone()));
    let y = agcm_graph(&mut g, cfg, &vars, x, c, Some(rng))?;
    let l = g.l1_loss(y, t)?;
    g.backward(l)?;
    params.accumulate_grads(&g, &vars, scale);
    Ok(g.value(l).data()[0].as_f64())
}

/// L1 training on random crops; the condition always sees the whole
/// (downsampled) image. Returns the best-on-validation model.
pub fn train_agcm(
    mut model: AgcmModel,
    train: &[ImagePair],
    val: &[ImagePair],
    cfg: &TrainConfig,
) -> Result<(AgcmModel, TrainSummary), ModelError> {
    if train.is_empty() || val.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if let Some(p) = train.first() {
        model.config.output_space = p.hdr.space;
        model.config.output_domain = p.hdr.domain;
    }
    let samples = prepare_samples(&model, train)?;
    let mcfg = model.config.clone();
    let probe = model.clone();
    let mut params = std::mem::take(&mut model.params);
    let mut rng_pick = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let summary = fit(
        &mut params,
        cfg,
        |p, rng, scale| {
            let i = rand::Rng::random_range(&mut rng_pick, 0..samples.len());
            agcm_step(&mcfg, p, &samples[i], cfg.patch, rng, scale)
        },
        |p| {
            let m = AgcmModel {
                config: probe.config.clone(),
                params: p.clone(),
            };
            evaluate_psnr(&m, val)
        },
    )?;
    model.params = params;
    Ok((model, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formation::{synthetic_pairs, SyntheticSpec, SyntheticTask};
    use crate::nn::{grad_check, GradCheckOptions};
    use rand::Rng;

    fn sdr_image(w: usize, h: usize, seed: u64) -> ColorImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d: Vec<f32> = (0..3 * w * h).map(|_| rng.random()).collect();
        ColorImage::from_planes(w, h, d, ColorSpace::Rec709, Domain::Encoded(TransferFn::SDR)).unwrap()
    }

    #[test]
    fn parameter_budget() {
        let m = AgcmModel::new(AgcmConfig::default(), 0).unwrap();
        let n = m.param_count();
        assert_eq!(n, 34_681);
        assert!((n as f64 - 35_000.0).abs() <= 0.2 * 35_000.0);
        let base = AgcmModel::new(AgcmConfig::base_only(), 0).unwrap();
        assert_eq!(base.param_count(), 4_611);
    }

    #[test]
    fn ccb_contract() {
        let cfg = AgcmConfig::default();
        let m = AgcmModel::new(cfg.clone(), 1).unwrap();
        let mut g = Graph::<f64>::new();
        let p = m.params.cast::<f64>();
        let vars = p.bind(&mut g);
        let off = 2 * cfg.base_layers;
        let c = g.input(Tensor::full(&[3, 8, 8], 0.4));
        let y = ccb_forward(&mut g, c, vars[off], vars[off + 1], 0.1, 1e-5, true).unwrap();
        assert_eq!(g.value(y).shape(), &[16, 4, 4]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let odd = g.input(Tensor::full(&[3, 7, 5], 0.4));
        let yo = ccb_forward(&mut g, odd, vars[off], vars[off + 1], 0.1, 1e-5, true).unwrap();
        assert_eq!(g.value(yo).shape(), &[16, 4, 3]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t: Tensor<f64> = Tensor::from_vec(&[3, 8, 8], (0..192).map(|_| rng.random()).collect());
        let r = g.input(t);
        let y = ccb_forward(&mut g, r, vars[off], vars[off + 1], 0.1, 1e-5, true).unwrap();
        let a = g.conv2d(r, vars[off], Some(vars[off + 1]), 1).unwrap();
        let a = g.avg_pool2(a).unwrap();
        let a = g.leaky_relu(a, 0.1);
        let a = g.instance_norm(a, 1e-5).unwrap();
        assert_eq!(g.value(y), g.value(a));

        let tiny = g.input(Tensor::full(&[3, 1, 4], 0.4));
        assert!(ccb_forward(&mut g, tiny, vars[off], vars[off + 1], 0.1, 1e-5, true).is_err());
    }

    #[test]
    fn condition_vector_contract() {
        let m = AgcmModel::new(AgcmConfig::default(), 3).unwrap();
        let bright = ColorImage::from_fn(
            128,
            128,
            ColorSpace::Rec709,
            Domain::Encoded(TransferFn::SDR),
            |x, y| [0.9, 0.8 - 0.3 * (x as f32 / 128.0), 0.7 + 0.2 * (y as f32 / 128.0)],
        );
        let dark = ColorImage::from_fn(
            128,
            128,
            ColorSpace::Rec709,
            Domain::Encoded(TransferFn::SDR),
            |x, y| [0.05 + 0.1 * (y as f32 / 128.0), 0.1, 0.2 * (x as f32 / 128.0)],
        );
        let vb = m.condition_vector(&bright).unwrap();
        let vd = m.condition_vector(&dark).unwrap();
        assert_eq!(vb.0.len(), 48);
        assert_ne!(vb, vd);
        assert_eq!(vb, m.condition_vector(&bright).unwrap());
        let zero = ColorImage::new(64, 64, ColorSpace::Rec709, Domain::Encoded(TransferFn::SDR));
        let vz = m.condition_vector(&zero).unwrap();
        assert!(vz.0.iter().all(|v| v.is_finite()));
        let small = ColorImage::new(32, 32, ColorSpace::Rec709, Domain::Encoded(TransferFn::SDR));
        assert!(m.condition_vector(&small).is_err());
    }

    #[test]
    fn frozen_condition_is_pixel_independent() {
        let m = AgcmModel::new(AgcmConfig::default(), 4).unwrap();
        let img = sdr_image(80, 64, 5);
        let v = m.condition_vector(&img).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut perm: Vec<usize> = (0..img.pixel_count()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let a = m.forward(&img.permute_pixels(&perm), Some(&v)).unwrap();
        let b = m.forward(&img, Some(&v)).unwrap().permute_pixels(&perm);
        assert_eq!(a.data(), b.data());

        let c = ColorImage::from_fn(80, 80, ColorSpace::Rec709, Domain::Encoded(TransferFn::SDR), |_, _| {
            [0.3, 0.6, 0.1]
        });
        let out = m.forward(&c, None).unwrap();
        for ch in 0..3 {
            let p = out.plane(ch);
            assert!(p.iter().all(|&v| v == p[0]));
        }
    }

    #[test]
    fn identity_init_reproduces_input() {
        let m = AgcmModel::identity(AgcmConfig::default(), 7).unwrap();
        let img = sdr_image(64, 64, 8);
        let out = m.forward(&img, None).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn neutral_modulation_equals_base_network() {
        let m = AgcmModel::new(AgcmConfig::default(), 9).unwrap();
        let mut base = AgcmModel::new(AgcmConfig::base_only(), 0).unwrap();
        for i in 0..base.params.len() {
            let src = m.params.get(i).data().to_vec();
            base.params.get_mut(i).data_mut().copy_from_slice(&src);
        }
        let img = sdr_image(64, 64, 10);
        let a = m.forward(&img, None).unwrap();
        let b = base.forward(&img, None).unwrap();
        assert_eq!(a.data(), b.data());

        // graph path agrees with the folded per-pixel path
        let mut g = Graph::<f32>::inference();
        let vars = base.params.bind(&mut g);
        let x = g.input(image_tensor(&img));
        let y = agcm_graph(&mut g, &base.config, &vars, x, None, None).unwrap();
        let max = g
            .value(y)
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p.clamp(0.0, 1.0) - q).abs())
            .fold(0.0f32, f32::max);
        assert!(max < 1e-5, "{max}");
    }

    #[test]
    fn full_graph_gradcheck() {
        let cfg = AgcmConfig {
            base_width: 8,
            cond_widths: vec![4, 6, 8, 8],
            cond_dim: 6,
            ..AgcmConfig::default()
        };
        let m = AgcmModel::new(cfg.clone(), 11).unwrap();
        let mut ps = m.params.cast::<f64>();
        // perturb the heads so the modulation is not the identity
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for i in 0..ps.len() {
            if ps.name(i).starts_with("gfm") || ps.name(i).ends_with(".b") {
                ps.get_mut(i)
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
        }
        let x: Tensor<f64> = Tensor::from_vec(&[3, 6, 5], (0..90).map(|_| rng.random()).collect());
        let c: Tensor<f64> = Tensor::from_vec(&[3, 16, 16], (0..768).map(|_| rng.random()).collect());
        let probe: Vec<f64> = (0..90).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = grad_check(
            &ps,
            |g, vars| {
                let xi = g.input(x.clone());
                let ci = g.input(c.clone());
                let y = agcm_graph(g, &cfg, vars, xi, Some(ci), None)?;
                g.dot(y, probe.clone())
            },
            GradCheckOptions {
                samples: 64,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.checked >= 32, "{report:?}");
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = AgcmModel::new(AgcmConfig::default(), 13).unwrap();
        let back = AgcmModel::from_checkpoint(m.to_checkpoint()).unwrap();
        assert_eq!(back, m);
        let mut ck = m.to_checkpoint();
        ck.kind = "le".into();
        assert!(matches!(AgcmModel::from_checkpoint(ck), Err(ModelError::Kind { .. })));
    }

    #[test]
    fn short_training_reduces_loss() {
        let spec = SyntheticSpec::new(SyntheticTask::Global, 3, 64, 64, 21);
        let pairs = synthetic_pairs(&spec).unwrap();
        let (train, val) = pairs.split_at(2);
        let m = AgcmModel::new(AgcmConfig::default(), 14).unwrap();
        let before = evaluate_l1(&m, train).unwrap();
        let cfg = TrainConfig {
            iterations: 60,
            batch: 2,
            patch: 32,
            lr: 1e-3,
            val_every: 20,
            ..Default::default()
        };
        let (trained, summary) = train_agcm(m, train, val, &cfg).unwrap();
        let after = evaluate_l1(&trained, train).unwrap();
        assert!(after < before, "{before} -> {after}");
        assert_eq!(summary.log.rows.len(), 4);
        assert!(train_agcm(trained, &[], val, &cfg).is_err());
    }
}
