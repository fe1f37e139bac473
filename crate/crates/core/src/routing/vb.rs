use super::{
    ActivationScales, RoutingAlgorithm, RoutingConfig, RoutingOutput, RoutingState, VbPosterior,
    VoteField,
};
use crate::error::Result;
use crate::tensor::Tensor;

/// Variational-Bayes routing with a diagonal Gaussian mixture over votes.
///
/// Responsibilities start at exactly `1/n_higher`. Each pass weights them by
/// the lower activations (`γ̃ = γ ⊙ a`) and updates the posterior:
///
/// ```text
/// N_j   = Σ_i γ̃_ij
/// μ_j   = Σ_i γ̃_ij V_ij / (N_j + ε)
/// Λ_jd  = (N_j + 1) / (Σ_i γ̃_ij (V_ijd − μ_jd)² + 1)      unit prior pseudo-count
/// E[ln π_j]     = ln((N_j + 1) / (Σ_k N_k + n_higher))
/// E[ln det Λ_j] = Σ_d ln Λ_jd
/// ```
///
/// Between passes the responsibilities become
/// `softmax_j(E[ln π_j] + ½E[ln det Λ_j] − ½ Σ_d Λ_jd (V_ijd − μ_jd)²)`.
/// After the last posterior update the activation is
/// `σ(β_a − (β_u + E[ln π_j] + E[ln det Λ_j]))` and the pose is `μ_j`.
pub fn vb_route<'t>(
    field: &VoteField<'t>,
    cfg: &RoutingConfig,
    scales: ActivationScales<'t>,
) -> Result<RoutingOutput<'t>> {
    cfg.expect(RoutingAlgorithm::Vb)?;
    let (d, votes) = field.flat_votes()?;
    let tape = votes.tape();
    let (b, l, h) = (d.batch, d.lower, d.higher);
    let acts = field.lower_activations.reshape(&[b, l, 1])?;

    let mut gamma = tape.constant(Tensor::full(&[b, l, h], 1.0 / h as f64));
    let mut state = RoutingState::default();
    let mut last = None;
    for it in 0..cfg.iterations {
        state.couplings.push(gamma);
        let weighted = gamma.mul(acts)?;
        let counts = weighted.sum_axis(1, false)?;
        let counts3 = counts.reshape(&[b, h, 1])?;
        let means = weighted
            .vote_sum(votes)?
            .div(counts3.add_scalar(cfg.epsilon))?;
        let scatter = weighted.vote_scatter(votes, means)?;
        let raw_precision = counts3.add_scalar(1.0).div(scatter.add_scalar(1.0))?;
        state.precision_clamps += raw_precision
            .value()
            .data()
            .iter()
            .filter(|&&x| x < cfg.epsilon)
            .count();
        let precision = raw_precision.clamp_min(cfg.epsilon);
        let total = counts.sum_axis(1, true)?.add_scalar(h as f64);
        let ln_pi = counts.add_scalar(1.0).div(total)?.ln()?;
        let ln_det = precision.ln()?.sum_axis(2, false)?;
        if it + 1 < cfg.iterations {
            let mahalanobis = votes.vote_sq_dist(means, Some(precision))?;
            let log_rho = ln_pi
                .add(ln_det.mul_scalar(0.5))?
                .reshape(&[b, 1, h])?
                .sub(mahalanobis.mul_scalar(0.5))?;
            gamma = log_rho.softmax(2)?;
        }
        last = Some((means, precision, ln_pi, ln_det));
    }
    let (means, precision, ln_pi, ln_det) = last.expect("iterations >= 1");
    let mixing = ln_pi.exp()?;
    let logits = scales
        .beta_a
        .sub(ln_pi.add(ln_det)?.add(scales.beta_u)?)?;
    state.vb_posterior = Some(VbPosterior {
        mixing,
        means,
        precisions: precision,
    });
    Ok(RoutingOutput {
        poses: means.reshape(&[b, h, d.pose, d.pose])?,
        activations: logits.logistic().reshape(&[b, h])?,
        state,
    })
}
