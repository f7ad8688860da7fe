use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NnError, ParamSet, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Number of coordinates compared.
    pub samples: usize,
    /// Central-difference step.
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            samples: 32,
            step: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a kink of a
    /// piecewise-linear op.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// `(tensor name, element index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences on randomly chosen coordinates of `params`.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<F>(params: &ParamSet<f64>, f: F, opts: GradCheckOptions) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NnError>,
{
    let eval = |p: &ParamSet<f64>| -> Result<(f64, Vec<bool>), NnError> {
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let out = f(&mut g, &vars)?;
        Ok((g.value(out).data()[0], g.kink_signature()))
    };

    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params.iter())
        .map(|(&v, (_, t))| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let total = params.count();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let order = sample(
        &mut rng,
        total,
        total.min(opts.samples.saturating_mul(8).max(opts.samples)),
    );
    let mut report = GradCheckReport {
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut probe = params.clone();
    for flat in order.iter() {
        if report.checked >= opts.samples {
            break;
        }
        let (mut ti, mut off) = (0, flat);
        while off >= params.get(ti).len() {
            off -= params.get(ti).len();
            ti += 1;
        }
        let base = params.get(ti).data()[off];
        probe.get_mut(ti).data_mut()[off] = base + opts.step;
        let (fp, sp) = eval(&probe)?;
        probe.get_mut(ti).data_mut()[off] = base - opts.step;
        let (fm, sm) = eval(&probe)?;
        probe.get_mut(ti).data_mut()[off] = base;
        if sp != sm {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * opts.step);
        let a = analytic[ti][off];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        report.checked += 1;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((params.name(ti).to_string(), off));
        }
    }
    Ok(report)
}
