use rand::seq::index::sample;

use super::{Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::lie::stream;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Probe at most this many randomly chosen entries per parameter tensor.
    pub max_probes_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, tol: 1e-4, max_probes_per_param: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub probes: usize,
    pub passed: bool,
    /// (parameter index, flat entry) of the worst probe.
    pub worst: Option<(usize, usize)>,
}

/// Compares tape gradients of the scalar function `f` against central
/// differences, entry by entry.
///
/// The relative error of a probe is `|analytic − numeric| / max(|analytic|,
/// |numeric|, REL_ERROR_FLOOR)`.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(invalid("grad_check step must be positive"));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = stream(opts.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        probes: 0,
        passed: true,
        worst: None,
    };
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[pi], p.shape());
        let entries: Vec<usize> = match opts.max_probes_per_param {
            Some(k) if k < p.len() => {
                let mut v = sample(&mut rng, p.len(), k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..p.len()).collect(),
        };
        for e in entries {
            let orig = p.data()[e];
            work[pi].data_mut()[e] = orig + opts.step;
            let up = eval(&work)?;
            work[pi].data_mut()[e] = orig - opts.step;
            let down = eval(&work)?;
            work[pi].data_mut()[e] = orig;

            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.probes += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((pi, e));
            }
        }
    }
    report.passed = report.max_rel_error < opts.tol;
    Ok(report)
}
