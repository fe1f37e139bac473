use super::squash::{squash, squashed_norm};
use super::{RoutingAlgorithm, RoutingConfig, RoutingOutput, RoutingState, VoteField};
use crate::error::Result;
use crate::tensor::Tensor;

/// Routing-by-agreement.
///
/// Agreements `b` start at zero. Each iteration takes couplings
/// `c = softmax_j(b)`, forms `v_j = squash(Σ_i c_ij ŷ_ij)` and, except after
/// the last pass, adds `⟨ŷ_ij, v_j⟩` to `b_ij`. The output activation is the
/// squashed length `‖v_j‖`. Lower activations are not consulted.
pub fn dynamic_route<'t>(field: &VoteField<'t>, cfg: &RoutingConfig) -> Result<RoutingOutput<'t>> {
    cfg.expect(RoutingAlgorithm::Dynamic)?;
    let (d, votes) = field.flat_votes()?;
    let tape = votes.tape();
    let (b, l, h) = (d.batch, d.lower, d.higher);

    let mut agreements = tape.constant(Tensor::zeros(&[b, l, h]));
    let mut state = RoutingState::default();
    let mut summed = None;
    let mut pose = None;
    for it in 0..cfg.iterations {
        let c = agreements.softmax(2)?;
        state.couplings.push(c);
        let s = c.vote_sum(votes)?;
        let v = squash(s, cfg.epsilon)?;
        if it + 1 < cfg.iterations {
            let agree = votes.vote_dot(v)?;
            agreements = agreements.add(agree)?;
        }
        summed = Some(s);
        pose = Some(v);
    }
    state.agreements = Some(agreements);
    let (s, v) = (summed.expect("iterations >= 1"), pose.expect("iterations >= 1"));
    Ok(RoutingOutput {
        poses: v.reshape(&[b, h, d.pose, d.pose])?,
        activations: squashed_norm(s, cfg.epsilon)?,
        state,
    })
}
