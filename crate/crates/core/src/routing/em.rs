use super::{ActivationScales, RoutingAlgorithm, RoutingConfig, RoutingOutput, RoutingState, VoteField};
use crate::error::Result;
use crate::tensor::Tensor;

/// Expectation-maximisation routing.
///
/// Responsibilities start uniform. Each pass runs an M-step, where weights
/// `w_ij = R_ij · a_i` give cluster means `v_j = Σ_i w_ij V_ij / (Σ_i w_ij + ε)`,
/// followed (except after the last pass) by an E-step
/// `R_ij = softmax_j(−‖V_ij − v_j‖²)`. The output activation is
/// `σ(β_a − β_u · cost_j)` with `cost_j` the weighted mean squared
/// vote-to-mean distance.
pub fn em_route<'t>(
    field: &VoteField<'t>,
    cfg: &RoutingConfig,
    scales: ActivationScales<'t>,
) -> Result<RoutingOutput<'t>> {
    cfg.expect(RoutingAlgorithm::Em)?;
    let (d, votes) = field.flat_votes()?;
    let tape = votes.tape();
    let (b, l, h) = (d.batch, d.lower, d.higher);
    let acts = field.lower_activations.reshape(&[b, l, 1])?;

    let mut resp = tape.constant(Tensor::full(&[b, l, h], 1.0 / h as f64));
    let mut state = RoutingState::default();
    let mut last = None;
    for it in 0..cfg.iterations {
        state.couplings.push(resp);
        let w = resp.mul(acts)?;
        let mass = w.sum_axis(1, false)?.add_scalar(cfg.epsilon);
        let means = w.vote_sum(votes)?.div(mass.reshape(&[b, h, 1])?)?;
        let dist = votes.vote_sq_dist(means, None)?;
        if it + 1 < cfg.iterations {
            resp = dist.neg().softmax(2)?;
        }
        last = Some((w, mass, means, dist));
    }
    let (w, mass, means, dist) = last.expect("iterations >= 1");
    let cost = w.mul(dist)?.sum_axis(1, false)?.div(mass)?;
    let activations = cost
        .mul(scales.beta_u)?
        .neg()
        .add(scales.beta_a)?
        .logistic();
    Ok(RoutingOutput {
        poses: means.reshape(&[b, h, d.pose, d.pose])?,
        activations,
        state,
    })
}
