//! Capsule tensors, layer specifications and the network stack.

mod network;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::{RoutingAlgorithm, RoutingConfig};
use crate::tensor::Var;

pub use network::{argmax_rows, LayerActivity, Network, NetworkOutput, ParamStore, BoundParams};

/// Pose and activation fields for one grid of capsules.
#[derive(Clone, Copy, Debug)]
pub struct CapsuleTensor<'t> {
    /// `N × H × W × n_caps × P × P`
    pub poses: Var<'t>,
    /// `N × H × W × n_caps`, each entry in `[0, 1]`
    pub activations: Var<'t>,
}

impl<'t> CapsuleTensor<'t> {
    pub fn new(poses: Var<'t>, activations: Var<'t>) -> Result<Self> {
        let ps = poses.shape();
        let acts = activations.shape();
        if ps.len() != 6 || ps[4] != ps[5] || acts.len() != 4 || ps[..4] != acts[..] {
            return Err(Error::Contract(format!(
                "capsule poses {ps:?} and activations {acts:?} disagree"
            )));
        }
        Ok(CapsuleTensor { poses, activations })
    }

    /// (N, H, W, n_caps, P)
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let s = self.poses.shape();
        (s[0], s[1], s[2], s[3], s[4])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Backbone,
    Primary,
    ConvCaps,
    ClassCaps,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Backbone => "backbone",
            LayerKind::Primary => "primary",
            LayerKind::ConvCaps => "conv_caps",
            LayerKind::ClassCaps => "class_caps",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "backbone" => Some(LayerKind::Backbone),
            "primary" => Some(LayerKind::Primary),
            "conv_caps" => Some(LayerKind::ConvCaps),
            "class_caps" => Some(LayerKind::ClassCaps),
            _ => None,
        }
    }
}

/// One entry of the resolved layer list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Capsule types (output channels for the backbone).
    pub n_caps: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub routing: Option<RoutingConfig>,
}

impl LayerSpec {
    /// Convolutional capsule layer with kernel 3, stride 1, padding 1 and 16 capsules.
    pub fn conv_caps(routing: RoutingConfig) -> Self {
        LayerSpec {
            kind: LayerKind::ConvCaps,
            n_caps: 16,
            kernel: 3,
            stride: 1,
            padding: 1,
            routing: Some(routing),
        }
    }
}

/// Convolutional backbone: two convolutions with a tanh after each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub hidden_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            hidden_channels: 32,
            kernel: 5,
            stride: 2,
            padding: 2,
        }
    }
}

/// Soft cap on the number of convolutional capsule layers.
pub const MAX_CONV_CAPS_LAYERS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub in_channels: usize,
    #[serde(default)]
    pub backbone: BackboneSpec,
    /// Convolutional capsule layers, not counting primary or class capsules.
    pub n_conv_caps_layers: usize,
    #[serde(default = "default_n_caps")]
    pub n_caps: usize,
    pub n_classes: usize,
    #[serde(default = "default_pose_dim")]
    pub pose_dim: usize,
    #[serde(default = "default_caps_kernel")]
    pub caps_kernel: usize,
    pub routing: RoutingConfig,
}

fn default_n_caps() -> usize {
    16
}

fn default_pose_dim() -> usize {
    4
}

fn default_caps_kernel() -> usize {
    3
}

impl NetworkSpec {
    pub fn new(
        in_channels: usize,
        n_conv_caps_layers: usize,
        n_classes: usize,
        algorithm: RoutingAlgorithm,
    ) -> Self {
        NetworkSpec {
            in_channels,
            backbone: BackboneSpec::default(),
            n_conv_caps_layers,
            n_caps: default_n_caps(),
            n_classes,
            pose_dim: default_pose_dim(),
            caps_kernel: default_caps_kernel(),
            routing: RoutingConfig::new(algorithm),
        }
    }

    pub fn with_caps(mut self, n_caps: usize) -> Self {
        self.n_caps = n_caps;
        self
    }

    pub fn algorithm(&self) -> RoutingAlgorithm {
        self.routing.algorithm
    }

    pub fn pose_len(&self) -> usize {
        self.pose_dim * self.pose_dim
    }

    /// Channels produced by the backbone: one pose block plus one activation per capsule.
    pub fn feature_channels(&self) -> usize {
        self.n_caps * (self.pose_len() + 1)
    }

    /// Routing instances performed by one forward pass.
    pub fn routing_instances(&self) -> usize {
        self.n_conv_caps_layers + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 {
            return bad("input channels must be positive".into());
        }
        if self.n_caps == 0 {
            return bad("capsule count must be positive".into());
        }
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.pose_dim == 0 {
            return bad("pose dimension must be positive".into());
        }
        if self.n_conv_caps_layers == 0 {
            return bad("at least one convolutional capsule layer is required".into());
        }
        if self.caps_kernel % 2 == 0 {
            return bad(format!("capsule kernel {} must be odd", self.caps_kernel));
        }
        let b = &self.backbone;
        if b.hidden_channels == 0 || b.kernel == 0 || b.stride == 0 {
            return bad(format!("invalid backbone {b:?}"));
        }
        self.routing.validate()?;
        if self.n_conv_caps_layers > MAX_CONV_CAPS_LAYERS {
            log::warn!(
                "{} convolutional capsule layers exceeds the usual maximum of {MAX_CONV_CAPS_LAYERS}",
                self.n_conv_caps_layers
            );
        }
        Ok(())
    }

    /// backbone → primary → L × conv_caps → class_caps
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = vec![
            LayerSpec {
                kind: LayerKind::Backbone,
                n_caps: self.feature_channels(),
                kernel: self.backbone.kernel,
                stride: self.backbone.stride,
                padding: self.backbone.padding,
                routing: None,
            },
            LayerSpec {
                kind: LayerKind::Primary,
                n_caps: self.n_caps,
                kernel: 1,
                stride: 1,
                padding: 0,
                routing: None,
            },
        ];
        for _ in 0..self.n_conv_caps_layers {
            layers.push(LayerSpec {
                n_caps: self.n_caps,
                kernel: self.caps_kernel,
                padding: self.caps_kernel / 2,
                ..LayerSpec::conv_caps(self.routing)
            });
        }
        layers.push(LayerSpec {
            kind: LayerKind::ClassCaps,
            n_caps: self.n_classes,
            kernel: 0,
            stride: 1,
            padding: 0,
            routing: Some(self.routing),
        });
        layers
    }

    /// Closed-form parameter count.
    ///
    /// With `C` input channels, backbone width `h`, kernel `k`, `n` capsules,
    /// pose length `p = P·P`, features `F = n(p+1)`, capsule kernel `K` and `c`
    /// classes:
    ///
    /// ```text
    /// backbone   h·C·k² + h + F·h·k² + F
    /// primary    F·n·p + n·p + F·n + n
    /// conv caps  K²·n·n·p  (+ K²·n·p·n self-routing, + 2 EM/VB)   per layer
    /// class caps n·c·p     (+ n·p·c self-routing,    + 2 EM/VB)
    /// ```
    pub fn expected_parameter_count(&self) -> usize {
        let (c, h, k) = (self.in_channels, self.backbone.hidden_channels, self.backbone.kernel);
        let (n, p, f) = (self.n_caps, self.pose_len(), self.feature_channels());
        let kk = self.caps_kernel * self.caps_kernel;
        let backbone = h * c * k * k + h + f * h * k * k + f;
        let primary = f * n * p + n * p + f * n + n;
        let (conv_extra, class_extra) = match self.algorithm() {
            RoutingAlgorithm::SelfRouting => (kk * n * p * n, n * p * self.n_classes),
            RoutingAlgorithm::Em | RoutingAlgorithm::Vb => (2, 2),
            RoutingAlgorithm::Dynamic => (0, 0),
        };
        let conv = kk * n * n * p + conv_extra;
        let class = n * self.n_classes * p + class_extra;
        backbone + primary + self.n_conv_caps_layers * conv + class
    }
}
