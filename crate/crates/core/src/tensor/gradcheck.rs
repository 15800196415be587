//! Central finite-difference verification of tape gradients (double precision).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Perturbation step `h` of the central difference.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Denominator floor of the relative error, so gradients that are zero
    /// up to round-off are compared absolutely.
    pub floor: f64,
    /// Check at most this many elements per input (sampled with a fixed seed).
    pub max_elements_per_input: Option<usize>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            max_elements_per_input: None,
        }
    }
}

/// Worst element found by a check.
#[derive(Debug, Clone, Copy)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }
}

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Fixed projection used to reduce a non-scalar output to a scalar loss.
pub(crate) fn projection(len: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_9c0d_e5);
    Tensor::from_fn(vec![len], |_| rng.random_range(-1.0..1.0))
}

fn scalar_loss<F>(f: &F, inputs: &[Tensor<f64>], track: bool) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), track)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = if tape.value(out).len() == 1 {
        out
    } else {
        let w = projection(tape.value(out).len());
        tape.dot_const(out, &w)?
    };
    Ok((tape, vars, loss))
}

/// Compares tape gradients of `f` with respect to every input against
/// central differences. Non-scalar outputs are reduced with a fixed random
/// projection. `exclude(input, element)` marks non-differentiable points
/// that must not be perturbed.
pub fn gradcheck<F, E>(
    name: &str,
    inputs: &[Tensor<f64>],
    opts: &GradcheckOptions,
    f: F,
    exclude: E,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    E: Fn(usize, usize) -> bool,
{
    let (tape, vars, loss) = scalar_loss(&f, inputs, true)?;
    let grads = tape.backward(loss)?;
    let mut report = GradcheckReport {
        name: name.to_string(),
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        worst: None,
        tolerance: opts.tolerance,
    };
    let mut sampler = ChaCha8Rng::seed_from_u64(0x9a7d);
    let mut perturbed = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        let len = inputs[i].len();
        let elements: Vec<usize> = match opts.max_elements_per_input {
            Some(cap) if cap < len => (0..cap).map(|_| sampler.random_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        for j in elements {
            if exclude(i, j) {
                report.skipped += 1;
                continue;
            }
            let x0 = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = x0 + opts.step;
            let plus = eval(&f, &perturbed)?;
            perturbed[i].data_mut()[j] = x0 - opts.step;
            let minus = eval(&f, &perturbed)?;
            perturbed[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[j];
            let err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(Mismatch {
                    input: i,
                    element: j,
                    analytic: a,
                    numeric,
                    rel_err: err,
                });
            }
        }
    }
    Ok(report)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (tape, _, loss) = scalar_loss(f, inputs, false)?;
    Ok(tape.value(loss).item())
}
