//! Shared training harness: halving learning-rate schedule, mini-batch
//! gradient averaging, periodic validation with best-checkpoint tracking,
//! optional early stop on a PSNR target, CSV log.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::{ColorError, ColorImage};
use crate::data_io::DataError;
use crate::metrics::MetricError;
use crate::nn::{Adam, NnError, ParamSet, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Color(#[from] ColorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged at iteration {iteration}: {source} (last finite loss {last_loss:.6})")]
    Diverged {
        iteration: usize,
        last_loss: f64,
        source: NnError,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint holds a '{found}' model, expected '{expected}'")]
    Kind { found: String, expected: &'static str },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    /// Side of the square training crops.
    pub patch: usize,
    pub lr: f64,
    /// Fractions of `iterations` at which the learning rate halves.
    pub milestones: Vec<f64>,
    pub val_every: usize,
    pub seed: u64,
    /// Stop as soon as validation PSNR reaches this value.
    pub target_psnr: Option<f64>,
    pub log_csv: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch: 4,
            patch: 96,
            lr: 4e-4,
            milestones: vec![0.5, 0.8],
            val_every: 500,
            seed: 0,
            target_psnr: None,
            log_csv: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch == 0 || self.patch == 0 || self.val_every == 0 {
            return Err(ModelError::Config("batch, patch and val_every must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(ModelError::Config(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }

    /// Learning rate in effect at 0-based iteration `it`.
    pub fn lr_at(&self, it: usize) -> f64 {
        let halvings = self
            .milestones
            .iter()
            .filter(|&&m| it as f64 >= m * self.iterations as f64)
            .count();
        self.lr * 0.5f64.powi(halvings as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub val_psnr: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,val_psnr\n");
        for r in &self.rows {
            s += &format!("{},{:.8},{:.6}\n", r.iteration, r.loss, r.val_psnr);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub best_val_psnr: f64,
    pub best_iteration: usize,
    pub iterations_run: usize,
    /// First iteration at which validation reached the target, if any.
    pub reached_target_at: Option<usize>,
    pub log: TrainLog,
}

/// Optimizes `params` with Adam. `step` computes one sample's loss and adds
/// its gradient, multiplied by the given scale, into the parameters' gradient
/// buffers. `validate` returns a PSNR for the current parameters. On return
/// `params` holds the best-validated values.
pub fn fit<S, V>(
    params: &mut ParamSet<f32>,
    cfg: &TrainConfig,
    mut step: S,
    mut validate: V,
) -> Result<TrainSummary, ModelError>
where
    S: FnMut(&mut ParamSet<f32>, &mut ChaCha8Rng, f32) -> Result<f64, NnError>,
    V: FnMut(&ParamSet<f32>) -> Result<f64, ModelError>,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut log = TrainLog::default();
    let mut best = params.clone();
    let mut best_psnr = validate(params)?;
    let mut best_it = 0;
    log.rows.push(LogRow {
        iteration: 0,
        loss: f64::NAN,
        val_psnr: best_psnr,
    });
    let mut reached = cfg.target_psnr.filter(|&t| best_psnr >= t).map(|_| 0);
    let mut loss_acc = 0.0;
    let mut loss_n = 0usize;
    let mut last_loss = f64::NAN;
    let mut it = 0;
    let scale = 1.0 / cfg.batch as f32;
    while reached.is_none() && it < cfg.iterations {
        params.zero_grad();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            let l = step(params, &mut rng, scale).map_err(|source| ModelError::Diverged {
                iteration: it + 1,
                last_loss,
                source,
            })?;
            batch_loss += l / cfg.batch as f64;
        }
        if !batch_loss.is_finite() {
            return Err(ModelError::Diverged {
                iteration: it + 1,
                last_loss,
                source: NnError::NonFiniteLoss,
            });
        }
        last_loss = batch_loss;
        adam.lr = cfg.lr_at(it);
        adam.step(params).map_err(|source| ModelError::Diverged {
            iteration: it + 1,
            last_loss,
            source,
        })?;
        it += 1;
        loss_acc += batch_loss;
        loss_n += 1;
        if it % cfg.val_every == 0 || it == cfg.iterations {
            let v = validate(params)?;
            log::debug!(
                "iteration {it}: loss {:.6}, val PSNR {v:.3} dB",
                loss_acc / loss_n as f64
            );
            log.rows.push(LogRow {
                iteration: it,
                loss: loss_acc / loss_n as f64,
                val_psnr: v,
            });
            loss_acc = 0.0;
            loss_n = 0;
            if v > best_psnr {
                best_psnr = v;
                best_it = it;
                best.copy_values_from(params);
            }
            if cfg.target_psnr.is_some_and(|t| v >= t) {
                reached = Some(it);
            }
        }
    }
    params.copy_values_from(&best);
    if let Some(path) = &cfg.log_csv {
        log.write_csv(path)?;
    }
    Ok(TrainSummary {
        best_val_psnr: best_psnr,
        best_iteration: best_it,
        iterations_run: it,
        reached_target_at: reached,
        log,
    })
}

/// `(3, H, W)` view of an image's planar data.
pub fn image_tensor(img: &ColorImage) -> Tensor<f32> {
    Tensor::from_vec(&[3, img.height(), img.width()], img.data().to_vec())
}

/// Sub-window of a `(C, H, W)` tensor.
pub fn crop_tensor(t: &Tensor<f32>, x0: usize, y0: usize, w: usize, h: usize) -> Tensor<f32> {
    let (c, th, tw) = t.chw().expect("rank-3 tensor");
    assert!(x0 + w <= tw && y0 + h <= th, "crop outside tensor");
    let mut out = Vec::with_capacity(c * w * h);
    for ch in 0..c {
        for y in y0..y0 + h {
            out.extend_from_slice(&t.data()[(ch * th + y) * tw + x0..][..w]);
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Uniformly placed square crop offset; the whole extent when the image is
/// smaller than `patch`.
pub fn random_window(rng: &mut ChaCha8Rng, w: usize, h: usize, patch: usize) -> (usize, usize, usize, usize) {
    let (pw, ph) = (patch.min(w), patch.min(h));
    let x0 = rng.random_range(0..=w - pw);
    let y0 = rng.random_range(0..=h - ph);
    (x0, y0, pw, ph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;

    #[test]
    fn schedule_halves_at_milestones() {
        let cfg = TrainConfig {
            iterations: 100,
            lr: 4e-4,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 4e-4);
        assert_eq!(cfg.lr_at(49), 4e-4);
        assert_eq!(cfg.lr_at(50), 2e-4);
        assert_eq!(cfg.lr_at(80), 1e-4);
        assert_eq!(cfg.lr_at(99), 1e-4);
    }

    fn toy() -> (
        ParamSet<f32>,
        impl FnMut(&mut ParamSet<f32>, &mut ChaCha8Rng, f32) -> Result<f64, NnError>,
    ) {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::from_vec(&[2], vec![1.0f32, -1.0]));
        let step = |p: &mut ParamSet<f32>, rng: &mut ChaCha8Rng, s: f32| {
            let mut g = Graph::new();
            let v = p.bind(&mut g);
            let t = g.input(Tensor::from_vec(&[2], vec![0.3, rng.random_range(0.19f32..0.21)]));
            let l = g.l1_loss(v[0], t)?;
            g.backward(l)?;
            p.accumulate_grads(&g, &v, s);
            Ok(g.value(l).data()[0] as f64)
        };
        (ps, step)
    }

    #[test]
    fn fit_reduces_loss_and_is_deterministic() {
        let cfg = TrainConfig {
            iterations: 400,
            batch: 2,
            lr: 0.01,
            val_every: 100,
            ..Default::default()
        };
        let run = || {
            let (mut ps, step) = toy();
            let s = fit(&mut ps, &cfg, step, |p| {
                let d = p.get(0).data();
                let mse = ((d[0] - 0.3).powi(2) + (d[1] - 0.2).powi(2)) as f64 / 2.0;
                Ok(-10.0 * mse.log10())
            })
            .unwrap();
            (ps, s)
        };
        let (a, sa) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        assert!(sa.best_val_psnr > sa.log.rows[0].val_psnr + 20.0);
        assert_eq!(sa.iterations_run, 400);
        assert_eq!(sa.log.rows.len(), 5);
        assert!(sa.log.to_csv().starts_with("iteration,loss,val_psnr\n0,"));
    }

    #[test]
    fn fit_stops_at_target() {
        let cfg = TrainConfig {
            iterations: 10_000,
            batch: 1,
            lr: 0.01,
            val_every: 10,
            target_psnr: Some(30.0),
            ..Default::default()
        };
        let (mut ps, step) = toy();
        let s = fit(&mut ps, &cfg, step, |p| {
            let d = p.get(0).data();
            let mse = ((d[0] - 0.3).powi(2) + (d[1] - 0.2).powi(2)) as f64 / 2.0;
            Ok(-10.0 * mse.log10())
        })
        .unwrap();
        let at = s.reached_target_at.unwrap();
        assert!(at < 10_000 && at == s.iterations_run);
    }

    #[test]
    fn fit_reports_divergence() {
        let cfg = TrainConfig {
            iterations: 10,
            batch: 1,
            val_every: 5,
            ..Default::default()
        };
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::from_vec(&[1], vec![1.0f32]));
        let err = fit(&mut ps, &cfg, |_, _, _| Err(NnError::NonFiniteLoss), |_| Ok(0.0)).unwrap_err();
        assert!(matches!(err, ModelError::Diverged { iteration: 1, .. }), "{err}");
    }

    #[test]
    fn crop_tensor_window() {
        let t = Tensor::from_vec(&[2, 3, 4], (0..24).map(|v| v as f32).collect());
        let c = crop_tensor(&t, 1, 1, 2, 2);
        assert_eq!(c.data(), &[5.0, 6.0, 9.0, 10.0, 17.0, 18.0, 21.0, 22.0]);
    }
}
