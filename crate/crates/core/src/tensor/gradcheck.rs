//! Central-difference verification of reverse-mode gradients.

use super::{NodeId, Tape, Tensor, TensorError};

/// Compare the tape gradient of a scalar-valued function against central
/// differences at every input coordinate; returns the worst relative error.
///
/// The relative error of a pair (a, b) is `|a - b| / max(|a|, |b|, 1e-3)`;
/// the floor keeps near-zero gradients from amplifying finite-difference
/// round-off into spurious failures.
pub fn grad_check<F>(f: F, x0: &Tensor<f64>, step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, NodeId) -> Result<NodeId, TensorError>,
{
    grad_check_multi(|tape, xs| f(tape, xs[0]), &[x0.clone()], step)
}

/// Multi-input variant: checks the gradient with respect to every input.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId, TensorError>,
{
    let eval = |points: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = points.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &ids)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(TensorError::Dimension(format!(
                "grad_check expects a scalar output, got shape {:?}",
                v.shape()
            )));
        }
        let y = v.item();
        if !y.is_finite() {
            return Err(TensorError::NonFinite("grad_check forward value".into()));
        }
        Ok(y)
    };

    // Reverse-mode gradients at the base point.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &ids)?;
    if tape.value(out).numel() != 1 {
        return Err(TensorError::Dimension(format!(
            "grad_check expects a scalar output, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    let mut grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    for (arg, x0) in inputs.iter().enumerate() {
        let analytic = grads
            .take(ids[arg])
            .unwrap_or_else(|| Tensor::zeros(x0.shape()));
        if !analytic.is_finite() {
            return Err(TensorError::NonFinite(format!(
                "grad_check reverse-mode gradient of input {arg}"
            )));
        }
        for i in 0..x0.numel() {
            let mut plus = inputs.to_vec();
            plus[arg].data_mut()[i] += step;
            let mut minus = inputs.to_vec();
            minus[arg].data_mut()[i] -= step;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            if !fd.is_finite() {
                return Err(TensorError::NonFinite(format!(
                    "grad_check finite difference at input {arg}[{i}]"
                )));
            }
            let ad = analytic.data()[i];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-3);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
