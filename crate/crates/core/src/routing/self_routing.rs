use super::{RoutingAlgorithm, RoutingConfig, RoutingOutput, RoutingState, VoteField};
use crate::error::{Error, Result};
use crate::tensor::Var;

/// Learned routing weights `W^route`.
///
/// Shape `T × P·P × n_higher`, one matrix per lower capsule type. When the
/// vote field has more lower capsules than types (`n_lower = G·T`), the
/// lower capsules are read as `G` groups of `T` types that share weights.
#[derive(Clone, Copy, Debug)]
pub struct SelfRoutingParams<'t> {
    pub w_route: Var<'t>,
}

/// Single-pass self-routing.
///
/// Couplings come straight from the lower pose, `c_i· = softmax(u_i W^route_i)`;
/// votes are gated by `c_ij · a_i`. The higher activation is
/// `Σ_i c_ij a_i / (Σ_i a_i + ε)` and the pose is
/// `Σ_i c_ij a_i ŷ_ij / (Σ_i c_ij a_i + ε)`.
pub fn self_route<'t>(
    field: &VoteField<'t>,
    lower_poses: Var<'t>,
    params: SelfRoutingParams<'t>,
    cfg: &RoutingConfig,
) -> Result<RoutingOutput<'t>> {
    cfg.expect(RoutingAlgorithm::SelfRouting)?;
    let (d, votes) = field.flat_votes()?;
    let (b, l, h, p2) = (d.batch, d.lower, d.higher, d.pose_len());
    let ps = lower_poses.shape();
    if ps != [b, l, d.pose, d.pose] {
        return Err(Error::Contract(format!(
            "lower poses {ps:?} do not match vote field {d:?}"
        )));
    }
    let ws = params.w_route.shape();
    if ws.len() != 3 || ws[1] != p2 || ws[2] != h || l % ws[0] != 0 {
        return Err(Error::Contract(format!(
            "routing weights {ws:?} incompatible with {l} lower capsules, pose {p2}, {h} higher"
        )));
    }
    let types = ws[0];
    let logits = lower_poses
        .reshape(&[b, l / types, types, 1, p2])?
        .bmm(params.w_route)?
        .reshape(&[b, l, h])?;
    let couplings = logits.softmax(2)?;
    let acts = field.lower_activations.reshape(&[b, l, 1])?;
    let gated = couplings.mul(acts)?;
    let mass = gated.sum_axis(1, true)?;
    let poses = gated
        .vote_sum(votes)?
        .div(mass.reshape(&[b, h, 1])?.add_scalar(cfg.epsilon))?;
    let activations = mass
        .div(acts.sum_axis(1, true)?.add_scalar(cfg.epsilon))?
        .reshape(&[b, h])?;
    Ok(RoutingOutput {
        poses: poses.reshape(&[b, h, d.pose, d.pose])?,
        activations,
        state: RoutingState {
            couplings: vec![couplings],
            ..RoutingState::default()
        },
    })
}
