//! Central finite-difference checking of tape gradients.
//!
//! The numeric side only ever evaluates the forward function on constant
//! tapes, so it shares no code with the backward pass it checks.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    /// Coordinates whose ±h probes landed on different piecewise branches.
    pub skipped_at_kinks: usize,
}

/// Relative error with a floor on the denominator.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of `f` with respect to every input against
/// central differences of step `h`.
///
/// `coords` limits how many coordinates of each input are probed (evenly
/// strided); `None` probes all of them. Probes that cross a relu sign or a
/// max-pool winner are reported as skipped rather than compared.
pub fn check<F>(
    inputs: &[Tensor],
    f: F,
    h: f64,
    floor: f64,
    coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let base_pattern = tape.branch_pattern();

    let eval = |probe: &[Tensor]| -> Result<(f64, Vec<usize>)> {
        let t = Tape::new();
        let vs: Vec<Var> = probe.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&t, &vs)?;
        let v = t.value(out).data()[0];
        Ok((v, t.branch_pattern()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_at_kinks: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("every input is a requires_grad leaf");
        let n = inputs[i].numel();
        let stride = coords.map_or(1, |c| (n / c.max(1)).max(1));
        for j in (0..n).step_by(stride) {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let (fp, pp) = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let (fm, pm) = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            if pp != base_pattern || pm != base_pattern {
                report.skipped_at_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[j];
            let e = rel_error(a, numeric, floor);
            report.checked += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}
