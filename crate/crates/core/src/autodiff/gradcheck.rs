//! Finite-difference verification of analytic gradients.

use super::{GradStore, ParamStore, Tape, Var};
use crate::error::{CdiraError, Result};

/// Compare analytic parameter gradients of a scalar-output graph against
/// central finite differences. Returns the worst relative error over every
/// parameter scalar.
///
/// `build` must construct the same graph for any parameter values; it is
/// re-run twice per scalar for the +/- eps evaluations. Scalars whose
/// perturbation flips a ReLU activation mask are skipped: the loss is not
/// differentiable across the kink, so central differences say nothing there.
pub fn grad_check<F>(params: &ParamStore, eps: f32, build: F) -> Result<f32>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(CdiraError::invalid(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let out = build(&mut tape, params)?;
    if tape.value(out).len() != 1 {
        return Err(CdiraError::invalid(
            "grad_check requires a scalar-output graph".to_string(),
        ));
    }
    let mut grads = GradStore::zeros_like(params);
    tape.backward(out, 1.0, params, &mut grads)?;

    let eval = |p: &ParamStore| -> Result<(f32, u64)> {
        let mut t = Tape::new();
        let v = build(&mut t, p)?;
        Ok((t.value(v).item(), t.relu_signature()))
    };

    let mut perturbed = params.clone();
    let mut worst = 0.0f32;
    for (id, _, tensor) in params.iter() {
        for j in 0..tensor.len() {
            let orig = tensor.data()[j];
            perturbed.tensor_mut(id).data_mut()[j] = orig + eps;
            let (f_plus, sig_plus) = eval(&perturbed)?;
            perturbed.tensor_mut(id).data_mut()[j] = orig - eps;
            let (f_minus, sig_minus) = eval(&perturbed)?;
            perturbed.tensor_mut(id).data_mut()[j] = orig;
            if sig_plus != sig_minus {
                continue;
            }

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let analytic = grads.grad(id).data()[j];
            // Relative error with an absolute floor so near-zero gradients
            // are compared absolutely.
            let denom = analytic.abs().max(numeric.abs()).max(1e-2);
            let err = (analytic - numeric).abs() / denom;
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
