//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of every backward rule it checks.

use super::{Graph, Tensor, Var};
use crate::error::Result;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Comparison of analytic and numeric gradients for one input tensor.
#[derive(Clone, Debug)]
pub struct GradComparison {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Flat indices that were probed.
    pub indices: Vec<usize>,
    /// Positions (into `indices`) where the probe straddled a kink; these
    /// are left out of [`relative_error`](Self::relative_error).
    pub kinks: Vec<usize>,
}

impl GradComparison {
    /// Fraction of probed entries flagged as kinks.
    pub fn kink_fraction(&self) -> f64 {
        if self.indices.is_empty() {
            0.0
        } else {
            self.kinks.len() as f64 / self.indices.len() as f64
        }
    }

    /// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)` over the probed entries; 0 when both vanish.
    pub fn relative_error(&self) -> f64 {
        let smooth = || {
            (0..self.indices.len())
                .filter(|i| !self.kinks.contains(i))
                .map(|i| (self.analytic[i], self.numeric[i]))
        };
        let diff = smooth().fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let scale = smooth().fold(0.0f64, |m, (a, n)| m.max(a.abs()).max(n.abs()));
        if scale < 1e-12 {
            diff
        } else {
            diff / scale
        }
    }
}

/// Options for [`check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Probe at most this many entries per input (random subset), or all.
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Flag an entry as a kink when the two one-sided differences disagree by
    /// more than this fraction of their magnitudes and the disagreement does
    /// not shrink quadratically with the step (smooth curvature does).
    /// `None` disables detection.
    pub kink_ratio: Option<f64>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries: None,
            seed: 0,
            kink_ratio: Some(1e-4),
        }
    }
}

/// Probe entries of one input of length `n`.
///
/// `eval(i, delta)` returns the function value with entry `i` offset by
/// `delta`; `f0` is the unperturbed value.
pub(crate) fn compare_entries<F>(
    n: usize,
    grad: &Tensor,
    f0: f64,
    opts: &GradCheck,
    rng: &mut ChaCha8Rng,
    mut eval: F,
) -> Result<GradComparison>
where
    F: FnMut(usize, f64) -> Result<f64>,
{
    let indices: Vec<usize> = match opts.max_entries {
        Some(m) if m < n => {
            let mut idx = sample(rng, n, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    };
    let mut analytic = Vec::with_capacity(indices.len());
    let mut numeric = Vec::with_capacity(indices.len());
    let mut kinks = Vec::new();
    for (pos, &i) in indices.iter().enumerate() {
        let fp = eval(i, opts.step)?;
        let fm = eval(i, -opts.step)?;
        numeric.push((fp - fm) / (2.0 * opts.step));
        analytic.push(grad.data()[i]);
        if let Some(ratio) = opts.kink_ratio {
            let (up, down) = (fp - f0, f0 - fm);
            let floor = 1e-13 * f0.abs().max(1.0);
            let gap = (up - down).abs();
            if gap > ratio * (up.abs() + down.abs()) + floor {
                let half = (eval(i, 0.5 * opts.step)? - f0) - (f0 - eval(i, -0.5 * opts.step)?);
                let shrink = half.abs() / gap;
                if !(0.2..=0.3).contains(&shrink) {
                    kinks.push(pos);
                }
            }
        }
    }
    Ok(GradComparison {
        analytic,
        numeric,
        indices,
        kinks,
    })
}

/// Compare `∂f/∂inputs` from [`Graph::backward`] against central differences.
///
/// `f` records a scalar-valued computation on a fresh graph from the given
/// input variables.
pub fn check<F>(inputs: &[Tensor], opts: &GradCheck, f: F) -> Result<Vec<GradComparison>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let f0 = g.value(out).item();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let grad = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let cmp = compare_entries(inputs[k].len(), &grad, f0, opts, &mut rng, |i, delta| {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + delta;
            let f = eval(&work);
            work[k].data_mut()[i] = orig;
            f
        })?;
        report.push(cmp);
    }
    Ok(report)
}

/// Largest relative error across all inputs of a [`check`] report.
pub fn worst(report: &[GradComparison]) -> f64 {
    report.iter().map(GradComparison::relative_error).fold(0.0, f64::max)
}
