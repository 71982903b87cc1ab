//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::tensor::{Result, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Check at most this many randomly chosen entries per parameter.
    /// `None` checks every entry.
    pub max_entries_per_param: Option<usize>,
    /// Seed for the entry sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

/// Outcome of a gradient check; the worst entry is reported by parameter
/// position and flat element index.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
    /// Set when the function itself failed; `max_rel_error` is then infinite.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.failure.is_none() && self.max_rel_error < tolerance
    }

    fn failed(msg: String) -> Self {
        GradCheckReport {
            max_rel_error: f64::INFINITY,
            worst_param: 0,
            worst_index: 0,
            analytic: f64::NAN,
            numeric: f64::NAN,
            entries_checked: 0,
            failure: Some(msg),
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares the tape's gradient of the scalar `f(params)` against central
/// differences `(f(p + h) - f(p - h)) / 2h`, entry by entry. `f` is called
/// on a fresh tape each time and must be deterministic. Never fails: a
/// failing `f` is reported through [`GradCheckReport::failure`].
pub fn grad_check<F>(f: F, params: &[Tensor], config: &GradCheckConfig) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let out = match f(&mut tape, &vars) {
            Ok(v) => v,
            Err(e) => return GradCheckReport::failed(e.to_string()),
        };
        if let Err(e) = tape.backward(out) {
            return GradCheckReport::failed(e.to_string());
        }
        vars.iter().map(|&v| tape.grad(v)).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
        failure: None,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let indices: Vec<usize> = match config.max_entries_per_param {
            Some(k) if k < param.len() => {
                let mut idx = sample(&mut rng, param.len(), k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..param.len()).collect(),
        };
        for idx in indices {
            let original = param.data()[idx];
            work[pi].data_mut()[idx] = original + config.step;
            let plus = evaluate(&f, &work);
            work[pi].data_mut()[idx] = original - config.step;
            let minus = evaluate(&f, &work);
            work[pi].data_mut()[idx] = original;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => return GradCheckReport::failed(e.to_string()),
            };
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic[pi].data()[idx];
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst_param = pi;
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorError;

    #[test]
    fn exact_quadratic() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let report = grad_check(
            |tape, p| {
                let sq = tape.mul(p[0], p[0])?;
                tape.sum(sq)
            },
            &[x],
            &GradCheckConfig::default(),
        );
        assert!(report.max_rel_error < 1e-7, "{report:?}");
        assert_eq!(report.entries_checked, 4);
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let x = Tensor::vector(vec![0.3, -0.7]).unwrap();
        let report = grad_check(
            |tape, p| {
                // tanh forward with the derivative of sigmoid
                let v = tape.value(p[0]).map(f64::tanh);
                let y = tape.custom(
                    &[p[0]],
                    v,
                    Box::new(|g, _, out| vec![g.zip_map(out, |gv, y| gv * y * (1.0 - y)).unwrap()]),
                );
                tape.sum(y)
            },
            &[x],
            &GradCheckConfig::default(),
        );
        assert!(!report.passes(1e-4));
        assert!(report.max_rel_error > 0.1);
    }

    #[test]
    fn failing_function_is_reported_not_raised() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        let report = grad_check(
            |_, _| Err(TensorError::Contract("boom".into())),
            &[x],
            &GradCheckConfig::default(),
        );
        assert!(report.failure.is_some());
        assert!(!report.passes(1.0));
    }

    #[test]
    fn sampling_limits_entries() {
        let x = Tensor::full(vec![10, 10], 0.5);
        let cfg = GradCheckConfig {
            max_entries_per_param: Some(7),
            ..Default::default()
        };
        let report = grad_check(
            |tape, p| {
                let t = tape.tanh(p[0])?;
                tape.sum(t)
            },
            &[x],
            &cfg,
        );
        assert_eq!(report.entries_checked, 7);
        assert!(report.passes(1e-6));
    }
}
