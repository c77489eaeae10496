use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. Returns `max |g_ad - g_fd| / max(1, |g_fd|)` over every
/// element of every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidValue(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (ti, t) in inputs.iter().enumerate() {
        for k in 0..t.len() {
            let orig = t.data()[k];
            probe[ti].data_mut()[k] = orig + eps;
            let up = eval(&probe)?;
            probe[ti].data_mut()[k] = orig - eps;
            let down = eval(&probe)?;
            probe[ti].data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * eps);
            let ad = analytic[ti].data()[k];
            worst = worst.max((ad - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}
