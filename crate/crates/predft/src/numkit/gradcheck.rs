use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use super::{NumError, Result};

/// Outcome of comparing analytic gradients against central finite
/// differences. Failures are reported, never thrown.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

const FD_BASE_STEP: f64 = 1e-4;
// below this magnitude both gradients are treated as zero; central
// differences bottom out around 1e-10 for well-scaled functions
const FD_ATOL: f64 = 1e-7;

/// Checks the analytic gradient of a scalar-valued tensor function at `x`
/// against central finite differences, coordinate by coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, rel_tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone().with_grad());
    let root = f(&mut tape, leaf)?;
    if !tape.value(root).is_scalar() {
        return Err(NumError::ShapeMismatch {
            op: "grad_check",
            detail: format!("function output must be scalar, got {:?}", tape.value(root).shape()),
        });
    }
    let grads = tape.backward(root)?;
    let analytic = grads
        .wrt(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |data: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let n = t.leaf(Tensor::new(x.shape().to_vec(), data.to_vec())?);
        let out = f(&mut t, n)?;
        t.value(out).item()
    };

    let mut report = GradCheckReport {
        passed: true,
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let h = FD_BASE_STEP * probe[i].abs().max(1.0);
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = eval(&probe)?;
        probe[i] = orig - h;
        let fm = eval(&probe)?;
        probe[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = if a.abs() <= FD_ATOL && numeric.abs() <= FD_ATOL {
            0.0
        } else {
            (a - numeric).abs() / a.abs().max(numeric.abs())
        };
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    report.passed = report.max_rel_err < rel_tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap();
        let report = grad_check(
            |t, n| {
                let doubled = t.scale(n, 2.0)?;
                t.sum(doubled)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn scaled_gradient_mutation_is_caught() {
        let x = Tensor::from_rows(&[vec![0.5, 1.5]]).unwrap();
        // deliberately wrong analytic path: f computes sum(2x) while the
        // "mutated" closure scales by 2.02 only in the forward re-evaluations
        let mut first_call = std::cell::Cell::new(true);
        let _ = &mut first_call;
        let report = grad_check(
            move |t, n| {
                let c = if first_call.get() {
                    first_call.set(false);
                    2.0
                } else {
                    2.02 // 1.01x the true gradient seen by finite differences
                };
                let scaled = t.scale(n, c)?;
                t.sum(scaled)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_err > 5e-3);
    }
}
