//! Quick oracle and invariant checks runnable from the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::spread_loss;
use crate::capsule::LayerKind;
use crate::diagnostics::ActivationLedger;
use crate::error::Result;
use crate::routing::{
    route, ActivationScales, RoutingAlgorithm, RoutingConfig, RoutingOutput, RoutingParams, SelfRoutingParams,
    VoteField,
};
use crate::tensor::gradcheck::check_gradients;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn routed<'t>(tape: &'t Tape, alg: RoutingAlgorithm, iterations: usize, v: &[Var<'t>]) -> Result<RoutingOutput<'t>> {
    let params = match alg {
        RoutingAlgorithm::Dynamic => RoutingParams::None,
        RoutingAlgorithm::SelfRouting => RoutingParams::SelfRouting(SelfRoutingParams { w_route: v[3] }),
        _ => RoutingParams::Scales(ActivationScales {
            beta_a: tape.scalar(0.5),
            beta_u: tape.scalar(0.2),
        }),
    };
    let field = VoteField::new(v[0], v[1])?;
    route(&field, v[2], params, &RoutingConfig::new(alg).with_iterations(iterations))
}

/// Inputs: votes `1×4×3×2×2`, activations, lower poses, route weights.
fn routing_inputs(seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        random(&mut rng, &[1, 4, 3, 2, 2], -1.0, 1.0),
        random(&mut rng, &[1, 4], 0.1, 0.9),
        random(&mut rng, &[1, 4, 2, 2], -1.0, 1.0),
        random(&mut rng, &[4, 4, 3], -1.0, 1.0),
    ]
}

fn gradient_checks(out: &mut Vec<Check>) {
    for alg in RoutingAlgorithm::ALL {
        let inputs = routing_inputs(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let wp = random(&mut rng, &[1, 3, 2, 2], -1.0, 1.0);
        let wa = random(&mut rng, &[1, 3], -1.0, 1.0);
        let res = check_gradients(&inputs, 1e-6, 1e-6, |tape, v| {
            let o = routed(tape, alg, 2, v).map_err(|e| crate::error::TensorError::Config {
                op: "selftest",
                reason: e.to_string(),
            })?;
            let a = o.poses.mul(tape.constant(wp.clone()))?.sum();
            let b = o.activations.mul(tape.constant(wa.clone()))?.sum();
            a.add(b)
        });
        out.push(match res {
            Ok(r) => Check {
                name: format!("gradient: {alg} routing"),
                passed: r.passes(1e-4),
                detail: format!("max relative error {:.2e} over {} entries", r.max_rel_error, r.checked),
            },
            Err(e) => Check {
                name: format!("gradient: {alg} routing"),
                passed: false,
                detail: e.to_string(),
            },
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let acts = random(&mut rng, &[5, 4], 0.0, 1.0);
    let labels = [0, 3, 1, 2, 3];
    let res = check_gradients(&[acts], 1e-6, 1e-6, |_, v| {
        spread_loss(v[0], &labels, 0.5).map_err(|e| crate::error::TensorError::Config {
            op: "selftest",
            reason: e.to_string(),
        })
    });
    out.push(match res {
        Ok(r) => Check {
            name: "gradient: spread loss".into(),
            passed: r.passes(1e-5),
            detail: format!("max relative error {:.2e}", r.max_rel_error),
        },
        Err(e) => Check {
            name: "gradient: spread loss".into(),
            passed: false,
            detail: e.to_string(),
        },
    });
}

fn invariant_checks(out: &mut Vec<Check>) -> Result<()> {
    for alg in RoutingAlgorithm::ALL {
        let mut worst_sum: f64 = 0.0;
        let mut range_ok = true;
        for seed in 0..25 {
            let tape = Tape::new();
            let v: Vec<Var<'_>> = routing_inputs(seed).into_iter().map(|t| tape.constant(t)).collect();
            let o = routed(&tape, alg, 3, &v)?;
            for c in &o.state.couplings {
                let c = c.value();
                let h = c.shape()[2];
                for row in c.data().chunks(h) {
                    worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            }
            range_ok &= o.activations.value().data().iter().all(|a| (0.0..=1.0).contains(a));
        }
        out.push(Check {
            name: format!("invariant: {alg} couplings sum to one, activations in [0, 1]"),
            passed: worst_sum <= 1e-12 && range_ok,
            detail: format!("worst |Σc − 1| = {worst_sum:.1e}"),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let batches: Vec<Tensor> = (0..7).map(|_| random(&mut rng, &[3, 2, 2, 5], 0.0, 1.0)).collect();
    let mut ledger = ActivationLedger::new(1);
    let id = ledger.register(LayerKind::ConvCaps, 5);
    let mut sums = [0.0; 5];
    let mut count = 0.0;
    for b in &batches {
        ledger.observe_batch(id, b)?;
        for row in b.data().chunks(5) {
            row.iter().zip(sums.iter_mut()).for_each(|(a, s)| *s += a);
            count += 1.0;
        }
    }
    let streamed = ledger.means(id).unwrap_or_default();
    let err = streamed.iter().zip(&sums).map(|(m, s)| (m - s / count).abs()).fold(0.0, f64::max);
    out.push(Check {
        name: "diagnostics: streaming mean matches stored oracle".into(),
        passed: err <= 1e-12,
        detail: format!("max error {err:.1e}"),
    });

    let mut ledger = ActivationLedger::new(1);
    let id = ledger.register(LayerKind::ConvCaps, 2);
    ledger.observe_batch(id, &Tensor::new(&[1, 1, 1, 2], vec![0.01, 0.010_000_1])?)?;
    let report = ledger.finalize(0.01)?;
    let dead: Vec<bool> = report.layers[0].capsules.iter().map(|c| c.dead).collect();
    out.push(Check {
        name: "diagnostics: threshold is inclusive".into(),
        passed: dead == [true, false],
        detail: format!("dead flags {dead:?}"),
    });
    Ok(())
}

/// Runs every check; errors inside a check count as failures.
pub fn run_selftest() -> Vec<Check> {
    let mut out = Vec::new();
    gradient_checks(&mut out);
    if let Err(e) = invariant_checks(&mut out) {
        out.push(Check {
            name: "invariants".into(),
            passed: false,
            detail: e.to_string(),
        });
    }
    out
}
