use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Spread loss `Σ_{j≠t} max(0, m − (a_t − a_j))² / B` over `B × n` class activations.
pub fn spread_loss<'t>(activations: Var<'t>, labels: &[usize], margin: f64) -> Result<Var<'t>> {
    Ok(spread_loss_sum(activations, labels, margin)?.mul_scalar(1.0 / labels.len() as f64))
}

/// Unnormalised spread loss, summed over the batch.
pub fn spread_loss_sum<'t>(activations: Var<'t>, labels: &[usize], margin: f64) -> Result<Var<'t>> {
    let s = activations.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Contract(format!(
            "class activations {s:?} do not match {} labels",
            labels.len()
        )));
    }
    if !(margin > 0.0 && margin < 1.0) {
        return Err(Error::Contract(format!("margin {margin} must lie in (0, 1)")));
    }
    let (b, n) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::Contract(format!("label {bad} outside {n} classes")));
    }
    let index: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * n + l).collect();
    let target = activations.gather(Rc::new(index), &[b, 1])?;
    let mut mask = Tensor::ones(&[b, n]);
    for (i, &l) in labels.iter().enumerate() {
        mask.data_mut()[i * n + l] = 0.0;
    }
    let mask = activations.tape().constant(mask);
    let gap = activations.sub(target)?.add_scalar(margin).relu();
    Ok(gap.square().mul(mask)?.sum())
}
