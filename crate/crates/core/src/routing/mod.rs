//! Routing procedures mapping a lower capsule layer's votes and activations
//! to the poses and activations of the layer above.
//!
//! All four algorithms consume a [`VoteField`] of shape
//! `B × n_lower × n_higher × P × P` plus lower activations `B × n_lower`, and
//! return a [`RoutingOutput`] with poses `B × n_higher × P × P` and
//! activations `B × n_higher` in `[0, 1]`. Every step is recorded on the
//! tape, so gradients flow through all unrolled iterations.

mod dynamic;
mod em;
mod self_routing;
mod squash;
mod vb;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Var;

pub use dynamic::dynamic_route;
pub use em::em_route;
pub use self_routing::{self_route, SelfRoutingParams};
pub use squash::{squash, squash_vec};
pub use vb::vb_route;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingAlgorithm {
    Dynamic,
    Em,
    Vb,
    #[serde(rename = "self")]
    SelfRouting,
}

impl RoutingAlgorithm {
    pub const ALL: [RoutingAlgorithm; 4] = [
        RoutingAlgorithm::Dynamic,
        RoutingAlgorithm::Em,
        RoutingAlgorithm::Vb,
        RoutingAlgorithm::SelfRouting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RoutingAlgorithm::Dynamic => "dynamic",
            RoutingAlgorithm::Em => "em",
            RoutingAlgorithm::Vb => "vb",
            RoutingAlgorithm::SelfRouting => "self",
        }
    }

    /// EM and VB carry the learnable activation offsets β_a, β_u.
    pub fn has_activation_scales(self) -> bool {
        matches!(self, RoutingAlgorithm::Em | RoutingAlgorithm::Vb)
    }
}

impl fmt::Display for RoutingAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoutingAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dynamic" => Ok(RoutingAlgorithm::Dynamic),
            "em" => Ok(RoutingAlgorithm::Em),
            "vb" => Ok(RoutingAlgorithm::Vb),
            "self" | "self_routing" | "self-routing" | "sr" => Ok(RoutingAlgorithm::SelfRouting),
            other => Err(Error::Config(format!("unknown routing algorithm `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub algorithm: RoutingAlgorithm,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_iterations() -> usize {
    3
}

fn default_epsilon() -> f64 {
    1e-8
}

impl RoutingConfig {
    pub fn new(algorithm: RoutingAlgorithm) -> Self {
        RoutingConfig {
            algorithm,
            iterations: default_iterations(),
            epsilon: default_epsilon(),
        }
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("routing iterations must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("routing epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }

    fn expect(&self, algorithm: RoutingAlgorithm) -> Result<()> {
        self.validate()?;
        if self.algorithm != algorithm {
            return Err(Error::Config(format!(
                "{algorithm} routing called with a {} configuration",
                self.algorithm
            )));
        }
        Ok(())
    }
}

/// Predictions from every lower capsule for every higher capsule.
#[derive(Clone, Copy, Debug)]
pub struct VoteField<'t> {
    /// `B × n_lower × n_higher × P × P`
    pub votes: Var<'t>,
    /// `B × n_lower`
    pub lower_activations: Var<'t>,
}

/// Extents of a vote field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VoteDims {
    pub batch: usize,
    pub lower: usize,
    pub higher: usize,
    pub pose: usize,
}

impl VoteDims {
    pub fn pose_len(&self) -> usize {
        self.pose * self.pose
    }
}

impl<'t> VoteField<'t> {
    pub fn new(votes: Var<'t>, lower_activations: Var<'t>) -> Result<Self> {
        let field = VoteField {
            votes,
            lower_activations,
        };
        field.dims()?;
        Ok(field)
    }

    pub fn dims(&self) -> Result<VoteDims> {
        let vs = self.votes.shape();
        let acts = self.lower_activations.shape();
        if vs.len() != 5 || vs[3] != vs[4] {
            return Err(Error::Contract(format!(
                "votes must be B×n_lower×n_higher×P×P, got {vs:?}"
            )));
        }
        if acts != [vs[0], vs[1]] {
            return Err(Error::Contract(format!(
                "lower activations {acts:?} do not match votes {vs:?}"
            )));
        }
        Ok(VoteDims {
            batch: vs[0],
            lower: vs[1],
            higher: vs[2],
            pose: vs[3],
        })
    }

    /// Votes flattened to `B × n_lower × n_higher × P·P`.
    pub(crate) fn flat_votes(&self) -> Result<(VoteDims, Var<'t>)> {
        let d = self.dims()?;
        let v = self
            .votes
            .reshape(&[d.batch, d.lower, d.higher, d.pose_len()])?;
        Ok((d, v))
    }
}

/// Learnable per-layer activation offsets used by EM and VB routing.
#[derive(Clone, Copy, Debug)]
pub struct ActivationScales<'t> {
    pub beta_a: Var<'t>,
    pub beta_u: Var<'t>,
}

/// Variational posterior over the higher-layer Gaussian mixture.
#[derive(Clone, Copy, Debug)]
pub struct VbPosterior<'t> {
    /// Expected mixing weights, `B × n_higher`.
    pub mixing: Var<'t>,
    /// `B × n_higher × P·P`
    pub means: Var<'t>,
    /// Diagonal precisions, `B × n_higher × P·P`.
    pub precisions: Var<'t>,
}

/// Intermediate routing quantities kept for inspection and tests.
#[derive(Clone, Debug, Default)]
pub struct RoutingState<'t> {
    /// Coupling coefficients c_ij (dynamic, self) or responsibilities R_ij / γ_ij
    /// (EM, VB) of every iteration, each `B × n_lower × n_higher`.
    pub couplings: Vec<Var<'t>>,
    /// Raw dynamic-routing agreements b_ij after the last update.
    pub agreements: Option<Var<'t>>,
    pub vb_posterior: Option<VbPosterior<'t>>,
    /// Precision entries clamped at epsilon (VB ill-conditioning counter).
    pub precision_clamps: usize,
}

#[derive(Clone, Debug)]
pub struct RoutingOutput<'t> {
    /// `B × n_higher × P × P`
    pub poses: Var<'t>,
    /// `B × n_higher`, each entry in `[0, 1]`.
    pub activations: Var<'t>,
    pub state: RoutingState<'t>,
}

/// Algorithm-specific learnables passed to [`route`].
#[derive(Clone, Copy, Debug)]
pub enum RoutingParams<'t> {
    None,
    Scales(ActivationScales<'t>),
    SelfRouting(SelfRoutingParams<'t>),
}

/// Dispatches to the algorithm named in `cfg`.
///
/// `lower_poses` (`B × n_lower × P × P`) is only read by self-routing.
pub fn route<'t>(
    field: &VoteField<'t>,
    lower_poses: Var<'t>,
    params: RoutingParams<'t>,
    cfg: &RoutingConfig,
) -> Result<RoutingOutput<'t>> {
    match (cfg.algorithm, params) {
        (RoutingAlgorithm::Dynamic, _) => dynamic_route(field, cfg),
        (RoutingAlgorithm::Em, RoutingParams::Scales(s)) => em_route(field, cfg, s),
        (RoutingAlgorithm::Vb, RoutingParams::Scales(s)) => vb_route(field, cfg, s),
        (RoutingAlgorithm::SelfRouting, RoutingParams::SelfRouting(p)) => {
            self_route(field, lower_poses, p, cfg)
        }
        (alg, _) => Err(Error::Config(format!("missing learnables for {alg} routing"))),
    }
}
