//! Central finite-difference checks of tape gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Relative errors are measured against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Caps the number of probed entries per input; entries are spread
    /// evenly over the flattened tensor. `None` probes every entry.
    pub max_entries_per_input: Option<usize>,
    /// Skips probes whose `+step` or `-step` evaluation flips a ReLU input's
    /// sign; the central difference there straddles a kink.
    pub skip_kinks: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-6,
            max_entries_per_input: None,
            skip_kinks: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub input: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Probes left out because they straddle a ReLU kink.
    pub skipped: usize,
    pub worst: Option<Mismatch>,
}

/// Compares the tape gradient of `f` against central differences.
///
/// `f` records a scalar function of `inputs` on a fresh tape; every input is
/// registered as a gradient-tracking leaf in order.
pub fn check_gradients<F>(inputs: &[Tensor], opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.value(out).item(), tape.relu_pattern()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let pattern = tape.relu_pattern();
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf gradient"))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (input, grad) in analytic.iter().enumerate() {
        let n = inputs[input].numel();
        let entries: Vec<usize> = match opts.max_entries_per_input {
            Some(m) if m < n => (0..m).map(|j| j * n / m).collect(),
            _ => (0..n).collect(),
        };
        for entry in entries {
            let base = inputs[input].data()[entry];
            probe[input].data_mut()[entry] = base + opts.step;
            let (up, up_pattern) = eval(&probe)?;
            probe[input].data_mut()[entry] = base - opts.step;
            let (down, down_pattern) = eval(&probe)?;
            probe[input].data_mut()[entry] = base;
            if opts.skip_kinks && (up_pattern != pattern || down_pattern != pattern) {
                report.skipped += 1;
                continue;
            }

            let numeric = (up - down) / (2.0 * opts.step);
            let a = grad.data()[entry];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some(Mismatch {
                    input,
                    entry,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relu_sum(t: &mut Tape, v: &[Var]) -> Result<Var> {
        let r = t.relu(v[0]);
        Ok(t.sum(r))
    }

    #[test]
    fn probes_across_a_relu_kink_are_skipped() {
        let x = Tensor::new(vec![3], vec![5e-5, 0.5, -0.5]).unwrap();
        let strict = GradCheckOptions {
            skip_kinks: false,
            ..Default::default()
        };
        let r = check_gradients(std::slice::from_ref(&x), strict, relu_sum).unwrap();
        assert!((r.max_rel_err - 0.25).abs() < 1e-9, "{r:?}");
        assert_eq!((r.checked, r.skipped), (3, 0));

        let r = check_gradients(&[x], GradCheckOptions::default(), relu_sum).unwrap();
        assert_eq!((r.checked, r.skipped), (2, 1));
        assert!(r.max_rel_err < 1e-9);
    }

    #[test]
    fn sampling_spreads_entries() {
        let x = Tensor::from_fn(vec![10], |i| i as f64);
        let opts = GradCheckOptions {
            max_entries_per_input: Some(4),
            ..Default::default()
        };
        let r = check_gradients(&[x], opts, |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert_eq!(r.checked, 4);
        assert!(r.max_rel_err < 1e-8);
    }
}
