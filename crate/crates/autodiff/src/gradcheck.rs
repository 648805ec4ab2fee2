//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Check at most this many coordinates per input (all when `None`).
    pub max_coords: Option<usize>,
    /// Seed for the coordinate sample.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose ±h probe crossed a ReLU kink, a pooling tie or the
    /// BCE clamp; the function is not differentiable there.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// Relative error with an absolute fallback when both magnitudes are
/// below `1e-6`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < 1e-6 {
        diff
    } else {
        diff / scale
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok((g.value(out).data()[0], g.kink_signature()))
}

/// Compares the analytic gradient of the scalar built by `f` against
/// `(f(x+h) − f(x−h)) / 2h`, coordinate by coordinate, for every input.
///
/// Coordinates whose probes change the graph's kink signature are skipped
/// and counted rather than compared.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let base_sig = g.kink_signature();
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[which]).expect("leaf gradient").data().to_vec();
        let mut order: Vec<usize> = (0..input.len()).collect();
        if cfg.max_coords.is_some() {
            order.shuffle(&mut rng);
        }
        let budget = cfg.max_coords.unwrap_or(usize::MAX);
        let mut done = 0;
        for coord in order {
            if done >= budget {
                break;
            }
            let x0 = input.data()[coord];
            probe[which].data_mut()[coord] = x0 + cfg.h;
            let (fp, sp) = evaluate(&f, &probe)?;
            probe[which].data_mut()[coord] = x0 - cfg.h;
            let (fm, sm) = evaluate(&f, &probe)?;
            probe[which].data_mut()[coord] = x0;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let err = relative_error(analytic[coord], numeric);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((which, coord));
            }
            report.checked += 1;
            done += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_falls_back_to_absolute_for_tiny_values() {
        assert!((relative_error(1e-8, 3e-8) - 2e-8).abs() < 1e-20);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn square_sum_passes() {
        let x = Tensor::new(vec![3], vec![0.3, -0.2, 0.9]).unwrap();
        let report = grad_check(
            |g, v| {
                let y = g.mul(v[0], v[0])?;
                g.sum(y)
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passes(1e-6), "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn relu_kink_is_skipped_not_compared() {
        let x = Tensor::new(vec![2], vec![1e-7, 0.5]).unwrap();
        let report = grad_check(
            |g, v| {
                let y = g.relu(v[0])?;
                g.sum(y)
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 1);
        assert!(report.max_rel_error < 1e-9);
    }
}
