use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{HpnetError, Result};

/// Compares reverse-mode gradients against central finite differences.
///
/// `loss_fn` receives a fresh tape plus one leaf per parameter and returns the
/// scalar loss node. The result is the largest
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)` over all elements.
pub fn grad_check<F>(params: &[Tensor], step: f64, loss_fn: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(HpnetError::Config(format!(
            "step must be positive, got {step}"
        )));
    }
    let eval = |values: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| {
                if with_grad {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let loss = loss_fn(&mut tape, &vars)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(HpnetError::Numeric(format!("loss evaluated to {value}")));
        }
        let grads = if with_grad {
            tape.backward(loss)?;
            vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (_, analytic) = eval(params, true)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (p, param) in params.iter().enumerate() {
        for (i, &orig) in param.data().iter().enumerate() {
            work[p].data_mut()[i] = orig + step;
            let (plus, _) = eval(&work, false)?;
            work[p].data_mut()[i] = orig - step;
            let (minus, _) = eval(&work, false)?;
            work[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[p][i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
