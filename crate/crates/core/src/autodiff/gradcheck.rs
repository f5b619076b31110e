//! Central finite-difference checks of tape gradients, run in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

/// Coordinates whose one-sided slopes disagree by more than this are treated
/// as sitting on a kink (e.g. `relu` at 0) and are left out of the comparison.
pub const KINK_TOL: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub h: f64,
    /// Check at most this many coordinates per input, chosen at random.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-3,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Max relative error between `backward()` and central differences of a
/// scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let cfg = GradCheck {
        h,
        ..GradCheck::default()
    };
    let report = grad_check_inputs(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), &cfg)?;
    Ok(report.max_rel_err)
}

/// Check a scalar function of several tensors against central differences.
pub fn grad_check_inputs<F>(f: F, xs: &[Tensor<f64>], cfg: &GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor<f64>> = xs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let base = eval(&work)?;
    for (k, var) in vars.iter().enumerate() {
        let n = xs[k].numel();
        let analytic = grads
            .get(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match cfg.max_coords {
            Some(limit) if limit < n => sample(&mut rng, n, limit).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + cfg.h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - cfg.h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;

            let fwd = (plus - base) / cfg.h;
            let bwd = (base - minus) / cfg.h;
            if (fwd - bwd).abs() > KINK_TOL * fwd.abs().max(bwd.abs()).max(1.0) {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.h);
            report.max_rel_err = report.max_rel_err.max(relative_error(analytic[i], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}
