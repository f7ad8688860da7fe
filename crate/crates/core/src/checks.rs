//! Gradient checks of every differentiable op and of both full networks,
//! shared by the `gradcheck` command and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agcm::{agcm_graph, AgcmConfig, AgcmModel};
use crate::le::{le_graph, LeConfig, LeModel};
use crate::nn::{grad_check, GradCheckOptions, GradCheckReport, Graph, NnError, ParamSet, Tensor, Var};

/// Largest relative error accepted by [`gradcheck_all`] consumers.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct OpCheck {
    pub name: &'static str,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl OpCheck {
    fn new(name: &'static str, r: GradCheckReport) -> Self {
        Self {
            name,
            checked: r.checked,
            skipped: r.skipped,
            max_rel_error: r.max_rel_error,
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= GRADCHECK_TOLERANCE
    }
}

fn rand_vec(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, rand_vec(n, -1.0, 1.0, rng))
}

/// Runs one check with `tensors` as the differentiated leaves; the scalar is
/// a fixed random projection of `f`'s output.
fn run<F>(name: &'static str, tensors: Vec<Tensor<f64>>, out_len: usize, seed: u64, f: F) -> Result<OpCheck, NnError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NnError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let probe = rand_vec(out_len, -1.0, 1.0, &mut rng);
    let mut ps = ParamSet::new();
    for (i, x) in tensors.into_iter().enumerate() {
        ps.push(format!("{name}.{i}"), x);
    }
    let r = grad_check(
        &ps,
        |g, v| {
            let y = f(g, v)?;
            if out_len == 1 {
                Ok(y)
            } else {
                g.dot(y, probe.clone())
            }
        },
        GradCheckOptions {
            samples: 48,
            step: 1e-3,
            seed,
        },
    )?;
    Ok(OpCheck::new(name, r))
}

/// Double-precision central-difference checks; each entry samples at least
/// 32 coordinates when the op has that many.
pub fn gradcheck_all(seed: u64) -> Result<Vec<OpCheck>, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    out.push(run(
        "conv1x1",
        vec![t(&[4, 5, 6], r), t(&[3, 4, 1, 1], r), t(&[3], r)],
        90,
        seed,
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1),
    )?);
    out.push(run(
        "conv3x3",
        vec![t(&[3, 5, 5], r), t(&[2, 3, 3, 3], r), t(&[2], r)],
        50,
        seed,
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1),
    )?);
    out.push(run(
        "conv3x3_stride2",
        vec![t(&[2, 7, 6], r), t(&[3, 2, 3, 3], r), t(&[3], r)],
        36,
        seed,
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2),
    )?);
    out.push(run(
        "linear",
        vec![t(&[12], r), t(&[5, 12], r), t(&[5], r)],
        5,
        seed,
        |g, v| g.linear(v[0], v[1], Some(v[2])),
    )?);
    out.push(run("relu", vec![t(&[48], r)], 48, seed, |g, v| Ok(g.relu(v[0])))?);
    out.push(run("leaky_relu", vec![t(&[48], r)], 48, seed, |g, v| {
        Ok(g.leaky_relu(v[0], 0.1))
    })?);
    out.push(run("avg_pool2", vec![t(&[2, 5, 7], r)], 24, seed, |g, v| {
        g.avg_pool2(v[0])
    })?);
    out.push(run("global_avg_pool", vec![t(&[4, 4, 5], r)], 4, seed, |g, v| {
        g.gap(v[0])
    })?);
    out.push(run("instance_norm", vec![t(&[3, 4, 4], r)], 48, seed, |g, v| {
        g.instance_norm(v[0], 1e-5)
    })?);
    out.push(run("dropout", vec![t(&[48], r)], 48, seed, move |g, v| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd7);
        g.dropout(v[0], 0.5, &mut mask_rng)
    })?);
    out.push(run("pixel_shuffle", vec![t(&[8, 3, 2], r)], 48, seed, |g, v| {
        g.pixel_shuffle(v[0], 2)
    })?);
    out.push(run(
        "gfm",
        vec![t(&[4, 3, 4], r), t(&[4], r), t(&[4], r)],
        48,
        seed,
        |g, v| g.gfm(v[0], v[1], v[2]),
    )?);
    out.push(run(
        "sft",
        vec![t(&[2, 4, 4], r), t(&[2, 4, 4], r), t(&[2, 4, 4], r)],
        32,
        seed,
        |g, v| g.sft(v[0], v[1], v[2]),
    )?);
    out.push(run(
        "add",
        vec![t(&[2, 3, 6], r), t(&[2, 3, 6], r)],
        36,
        seed,
        |g, v| g.add(v[0], v[1]),
    )?);
    out.push(run(
        "concat",
        vec![t(&[2, 3, 3], r), t(&[3, 3, 3], r)],
        45,
        seed,
        |g, v| g.concat(v[0], v[1]),
    )?);
    out.push(run("narrow", vec![t(&[5, 3, 4], r)], 24, seed, |g, v| {
        g.narrow(v[0], 1, 2)
    })?);
    out.push(run("pad_reflect", vec![t(&[2, 5, 4], r)], 2 * 7 * 7, seed, |g, v| {
        g.pad_reflect(v[0], 2, 3)
    })?);
    out.push(run("crop", vec![t(&[2, 6, 6], r)], 2 * 4 * 5, seed, |g, v| {
        g.crop(v[0], 4, 5)
    })?);
    let target = Tensor::from_vec(&[48], rand_vec(48, -1.0, 1.0, r));
    out.push(run("l1_loss", vec![t(&[48], r)], 1, seed, move |g, v| {
        let tv = g.input(target.clone());
        g.l1_loss(v[0], tv)
    })?);
    out.push(agcm_check(seed)?);
    out.push(le_check(seed)?);
    Ok(out)
}

fn jitter(ps: &mut ParamSet<f64>, amount: f64, rng: &mut ChaCha8Rng) {
    for i in 0..ps.len() {
        ps.get_mut(i)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-amount..amount));
    }
}

/// Full AGCM graph (condition network, base network, modulation) at a
/// reduced width.
fn agcm_check(seed: u64) -> Result<OpCheck, NnError> {
    let cfg = AgcmConfig {
        base_width: 8,
        cond_widths: vec![4, 6, 8, 8],
        cond_dim: 6,
        ..AgcmConfig::default()
    };
    let m = AgcmModel::new(cfg.clone(), seed).map_err(|e| NnError::Shape(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa6);
    let mut ps = m.params.cast::<f64>();
    jitter(&mut ps, 0.2, &mut rng);
    let x = Tensor::from_vec(&[3, 6, 5], rand_vec(90, 0.0, 1.0, &mut rng));
    let c = Tensor::from_vec(&[3, 16, 16], rand_vec(768, 0.0, 1.0, &mut rng));
    let probe = rand_vec(90, -1.0, 1.0, &mut rng);
    let r = grad_check(
        &ps,
        |g, vars| {
            let xi = g.input(x.clone());
            let ci = g.input(c.clone());
            let y = agcm_graph(g, &cfg, vars, xi, Some(ci), None)?;
            g.dot(y, probe.clone())
        },
        GradCheckOptions {
            samples: 64,
            step: 1e-3,
            seed,
        },
    )?;
    Ok(OpCheck::new("agcm_full", r))
}

fn le_check(seed: u64) -> Result<OpCheck, NnError> {
    let cfg = LeConfig {
        channels: 2,
        blocks: [1, 1, 1],
        ..LeConfig::default()
    };
    let m = LeModel::new(cfg.clone(), seed).map_err(|e| NnError::Shape(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1e);
    let mut ps = m.params.cast::<f64>();
    jitter(&mut ps, 0.2, &mut rng);
    let x = Tensor::from_vec(&[3, 9, 10], rand_vec(270, 0.0, 1.0, &mut rng));
    let probe = rand_vec(270, -1.0, 1.0, &mut rng);
    let r = grad_check(
        &ps,
        |g, vars| {
            let xi = g.input(x.clone());
            let y = le_graph(g, &cfg, vars, xi)?;
            g.dot(y, probe.clone())
        },
        GradCheckOptions {
            samples: 64,
            step: 1e-3,
            seed,
        },
    )?;
    Ok(OpCheck::new("le_full", r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let checks = gradcheck_all(1).unwrap();
        assert_eq!(checks.len(), 21);
        for c in &checks {
            assert!(c.passed(), "{c:?}");
            assert!(c.checked >= 32, "{c:?}");
        }
    }
}
