use crate::error::Result;
use crate::tensor::Var;

/// `‖v‖²/(1+‖v‖²) · v/‖v‖` on a plain vector; `eps` keeps the zero vector at zero.
pub fn squash_vec(v: &[f64], eps: f64) -> Vec<f64> {
    let n2: f64 = v.iter().map(|x| x * x).sum();
    let scale = n2 / (1.0 + n2) / (n2 + eps).sqrt();
    v.iter().map(|x| x * scale).collect()
}

/// Squash along the last axis of `s`.
pub fn squash<'t>(s: Var<'t>, eps: f64) -> Result<Var<'t>> {
    let last = s.shape().len() - 1;
    let n2 = s.square().sum_axis(last, true)?;
    let gain = n2.div(n2.add_scalar(1.0))?;
    let norm = n2.add_scalar(eps).sqrt()?;
    Ok(s.mul(gain.div(norm)?)?)
}

/// `‖squash(s)‖` along the last axis (no trailing extent).
pub(crate) fn squashed_norm<'t>(s: Var<'t>, eps: f64) -> Result<Var<'t>> {
    let last = s.shape().len() - 1;
    Ok(s.square().sum_axis(last, false)?.squash_length(eps)?)
}
