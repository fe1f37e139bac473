//! Plain-Rust glue between flat arrays and the routing engine.

use capsnet::routing::{
    route, ActivationScales, RoutingAlgorithm, RoutingConfig, RoutingParams, SelfRoutingParams, VoteField,
};
use capsnet::tensor::{Tape, Tensor};
use capsnet::{Error, Result};

/// Flat row-major values with their shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Array {
    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::new(&self.shape, self.data.clone())?)
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Array {
            data: t.data().to_vec(),
            shape: t.shape().to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RouteRequest {
    pub algorithm: String,
    /// `B × n_lower × n_higher × P × P`
    pub votes: Array,
    /// `B × n_lower`
    pub activations: Array,
    /// `B × n_lower × P × P`, self-routing only.
    pub lower_poses: Option<Array>,
    /// `T × P·P × n_higher`, self-routing only.
    pub w_route: Option<Array>,
    pub beta_a: f64,
    pub beta_u: f64,
    pub iterations: usize,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Routed {
    pub poses: Array,
    pub activations: Array,
    /// One coupling array per iteration.
    pub couplings: Vec<Array>,
}

pub fn route_arrays(req: &RouteRequest) -> Result<Routed> {
    let alg: RoutingAlgorithm = req.algorithm.parse()?;
    let cfg = RoutingConfig {
        epsilon: req.epsilon,
        ..RoutingConfig::new(alg).with_iterations(req.iterations)
    };
    let tape = Tape::new();
    let votes = tape.constant(req.votes.to_tensor()?);
    let acts = tape.constant(req.activations.to_tensor()?);
    let field = VoteField::new(votes, acts)?;
    let dims = field.dims()?;
    let lower = match &req.lower_poses {
        Some(p) => tape.constant(p.to_tensor()?),
        None => tape.constant(Tensor::zeros(&[dims.batch, dims.lower, dims.pose, dims.pose])),
    };
    let params = match alg {
        RoutingAlgorithm::Dynamic => RoutingParams::None,
        RoutingAlgorithm::Em | RoutingAlgorithm::Vb => RoutingParams::Scales(ActivationScales {
            beta_a: tape.scalar(req.beta_a),
            beta_u: tape.scalar(req.beta_u),
        }),
        RoutingAlgorithm::SelfRouting => {
            let (Some(_), Some(w)) = (&req.lower_poses, &req.w_route) else {
                return Err(Error::Config("self routing needs lower_poses and w_route".into()));
            };
            RoutingParams::SelfRouting(SelfRoutingParams {
                w_route: tape.constant(w.to_tensor()?),
            })
        }
    };
    let out = route(&field, lower, params, &cfg)?;
    Ok(Routed {
        poses: Array::from_tensor(&out.poses.value()),
        activations: Array::from_tensor(&out.activations.value()),
        couplings: out.state.couplings.iter().map(|c| Array::from_tensor(&c.value())).collect(),
    })
}
