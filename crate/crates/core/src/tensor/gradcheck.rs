//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central difference step.
    pub step: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Check at most this many randomly chosen entries per input.
    pub max_entries: Option<usize>,
    /// Seeds the cotangent for non-scalar outputs and the entry subsample.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares the analytic gradient of `op` with respect to every input against
/// central finite differences.
///
/// A non-scalar output is contracted with a fixed random cotangent first, so
/// every output element participates.
pub fn grad_check<Op>(op: Op, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    Op: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut cotangent: Option<Tensor<f64>> = None;
    let eval = |values: &[Tensor<f64>], cotangent: &mut Option<Tensor<f64>>, backprop: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        if !g.value(out).is_finite() {
            return Err(Error::NonFinite(format!(
                "op produced non-finite output {:?}",
                g.value(out)
            )));
        }
        let loss = if g.value(out).numel() == 1 {
            out
        } else {
            let w = cotangent.get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
                Tensor::rand_uniform(g.shape(out).to_vec(), -1.0, 1.0, &mut rng)
            });
            let w = g.constant(w.clone());
            let prod = g.mul(out, w)?;
            g.sum(prod)
        };
        let value = g.value(loss).item();
        if !backprop {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        Ok((value, vars.iter().map(|&v| g.grad(v)).collect()))
    };

    let (_, analytic) = eval(inputs, &mut cotangent, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < n => {
                let mut picked = sample(&mut rng, n, k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        for idx in entries {
            let orig = input.data()[idx];
            probe[which].data_mut()[idx] = orig + opts.step;
            let (plus, _) = eval(&probe, &mut cotangent, false)?;
            probe[which].data_mut()[idx] = orig - opts.step;
            let (minus, _) = eval(&probe, &mut cotangent, false)?;
            probe[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let exact = analytic[which].as_ref().map_or(0.0, |g| g.data()[idx]);
            if !numeric.is_finite() || !exact.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient entry {idx} of input {which}: analytic {exact}, numeric {numeric}"
                )));
            }
            let denom = exact.abs().max(numeric.abs()).max(opts.floor);
            let rel = (exact - numeric).abs() / denom;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((which, idx));
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}

/// Random inputs in `[-scale, scale)` for gradient checks.
pub fn random_input<R: Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Tensor<f64> {
    Tensor::rand_uniform(shape.to_vec(), -scale, scale, rng)
}
