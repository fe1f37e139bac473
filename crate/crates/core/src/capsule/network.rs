use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{CapsuleTensor, LayerKind, NetworkSpec};
use crate::error::{Error, Result};
use crate::routing::{
    route, ActivationScales, RoutingAlgorithm, RoutingParams, SelfRoutingParams, VoteField,
};
use crate::tensor::{ConvGeometry, Tape, Tensor, Var, PAD};

/// Standard deviation of the noise added to identity-initialised transforms.
const TRANSFORM_NOISE: f64 = 0.1;
const ROUTE_WEIGHT_STD: f64 = 0.1;
/// Initial (β_a, β_u) for EM routing layers.
const EM_SCALES_INIT: (f64, f64) = (1.0, 0.1);
/// Initial (β_a, β_u) for VB routing layers.
const VB_SCALES_INIT: (f64, f64) = (0.0, 0.0);

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Parameters recorded on a tape for one forward pass.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        BoundParams { vars }
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients in parameter order (zeros where nothing flowed).
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars.iter().map(Var::grad_or_zeros).collect()
    }

    fn get(&self, id: usize) -> Var<'t> {
        self.vars[id]
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
enum RouteIds {
    None,
    Scales { beta_a: usize, beta_u: usize },
    SelfRouting { w_route: usize },
}

#[derive(Clone, Copy, Debug)]
struct CapsLayerIds {
    transform: usize,
    route: RouteIds,
}

/// Activations of one capsule layer, for telemetry.
#[derive(Clone, Copy, Debug)]
pub struct LayerActivity<'t> {
    pub kind: LayerKind,
    /// `N × H × W × n_caps`
    pub activations: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct NetworkOutput<'t> {
    /// `N × n_classes × P × P`
    pub class_poses: Var<'t>,
    /// `N × n_classes`; the classification scores.
    pub class_activations: Var<'t>,
    /// Primary, each convolutional capsule layer, then class capsules.
    pub layers: Vec<LayerActivity<'t>>,
    pub routing_instances: usize,
    pub precision_clamps: usize,
}

impl NetworkOutput<'_> {
    /// Argmax over class activations per sample.
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.class_activations.value())
    }
}

/// Index of the largest entry in each row of an `N × n` tensor; ties go to
/// the lowest index.
pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    let n = scores.shape()[1];
    scores
        .data()
        .chunks(n)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

/// backbone → primary capsules → L convolutional capsule layers → class capsules.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    params: ParamStore,
    conv1: ConvIds,
    conv2: ConvIds,
    primary_pose: ConvIds,
    primary_act: ConvIds,
    conv_caps: Vec<CapsLayerIds>,
    class_caps: CapsLayerIds,
}

impl Network {
    /// Builds a network with parameters drawn deterministically from `seed`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Network> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let normal = |shape: &[usize], std: f64, rng: &mut ChaCha8Rng| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape, |_| dist.sample(rng))
        };
        let (p, p2) = (spec.pose_dim, spec.pose_len());
        let (n, f) = (spec.n_caps, spec.feature_channels());
        let b = &spec.backbone;
        let kk = b.kernel * b.kernel;

        let fan1 = (spec.in_channels * kk) as f64;
        let conv1 = ConvIds {
            weight: params.push(
                "backbone.conv1.weight",
                normal(&[b.hidden_channels, spec.in_channels, b.kernel, b.kernel], fan1.sqrt().recip(), &mut rng),
            ),
            bias: params.push("backbone.conv1.bias", Tensor::zeros(&[b.hidden_channels])),
        };
        let fan2 = (b.hidden_channels * kk) as f64;
        let conv2 = ConvIds {
            weight: params.push(
                "backbone.conv2.weight",
                normal(&[f, b.hidden_channels, b.kernel, b.kernel], fan2.sqrt().recip(), &mut rng),
            ),
            bias: params.push("backbone.conv2.bias", Tensor::zeros(&[f])),
        };
        let fstd = (f as f64).sqrt().recip();
        let primary_pose = ConvIds {
            weight: params.push("primary.pose.weight", normal(&[f, n * p2], fstd, &mut rng)),
            bias: params.push("primary.pose.bias", Tensor::zeros(&[n * p2])),
        };
        let primary_act = ConvIds {
            weight: params.push("primary.activation.weight", normal(&[f, n], fstd, &mut rng)),
            bias: params.push("primary.activation.bias", Tensor::zeros(&[n])),
        };

        let algorithm = spec.algorithm();
        let caps_layer = |prefix: String, lower: usize, higher: usize, params: &mut ParamStore, rng: &mut ChaCha8Rng| {
            let mut w = normal(&[lower, higher, p, p], TRANSFORM_NOISE, rng);
            for blk in w.data_mut().chunks_mut(p2) {
                for d in 0..p {
                    blk[d * p + d] += 1.0;
                }
            }
            let transform = params.push(format!("{prefix}.transform"), w);
            let route = match algorithm {
                RoutingAlgorithm::Dynamic => RouteIds::None,
                RoutingAlgorithm::SelfRouting => RouteIds::SelfRouting {
                    w_route: params.push(
                        format!("{prefix}.route"),
                        normal(&[lower, p2, higher], ROUTE_WEIGHT_STD, rng),
                    ),
                },
                RoutingAlgorithm::Em | RoutingAlgorithm::Vb => {
                    let (a, u) = if algorithm == RoutingAlgorithm::Em { EM_SCALES_INIT } else { VB_SCALES_INIT };
                    RouteIds::Scales {
                        beta_a: params.push(format!("{prefix}.beta_a"), Tensor::scalar(a)),
                        beta_u: params.push(format!("{prefix}.beta_u"), Tensor::scalar(u)),
                    }
                }
            };
            CapsLayerIds { transform, route }
        };
        let window = spec.caps_kernel * spec.caps_kernel * n;
        let conv_caps = (0..spec.n_conv_caps_layers)
            .map(|l| caps_layer(format!("conv_caps.{l}"), window, n, &mut params, &mut rng))
            .collect();
        let class_caps = caps_layer("class_caps".into(), n, spec.n_classes, &mut params, &mut rng);

        Ok(Network {
            spec: spec.clone(),
            params,
            conv1,
            conv2,
            primary_pose,
            primary_act,
            conv_caps,
            class_caps,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Replaces all parameters; names and shapes must match.
    pub fn load_params(&mut self, params: ParamStore) -> Result<()> {
        if params.names != self.params.names
            || params
                .tensors
                .iter()
                .zip(&self.params.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Format("checkpoint parameters do not match the network spec".into()));
        }
        self.params = params;
        Ok(())
    }

    pub(crate) fn from_parts(spec: &NetworkSpec, names: Vec<String>, tensors: Vec<Tensor>) -> Result<Network> {
        let mut net = Network::build(spec, 0)?;
        net.load_params(ParamStore { names, tensors })?;
        Ok(net)
    }

    /// Records parameters on `tape`, as trainable leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        let vars = self
            .params
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        BoundParams { vars }
    }

    /// Two stride-2 convolutions with tanh: `N×C×H×W → N×F×H'×W'`.
    pub fn backbone_forward<'t>(&self, bound: &BoundParams<'t>, images: Var<'t>) -> Result<Var<'t>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.spec.in_channels {
            return Err(Error::Config(format!(
                "images {s:?} do not match {} input channels",
                self.spec.in_channels
            )));
        }
        let b = &self.spec.backbone;
        let mut x = images;
        for ids in [self.conv1, self.conv2] {
            let w = bound.get(ids.weight);
            let channels = w.shape()[0];
            let y = x.conv2d(w, b.stride, b.padding)?;
            let bias = bound.get(ids.bias).reshape(&[1, channels, 1, 1])?;
            x = y.add(bias)?.tanh();
        }
        Ok(x)
    }

    /// 1×1 convolutions from features to poses and logistic activations.
    pub fn primary_caps_forward<'t>(&self, bound: &BoundParams<'t>, features: Var<'t>) -> Result<CapsuleTensor<'t>> {
        let s = features.shape();
        let block = self.spec.feature_channels();
        if s.len() != 4 || s[1] % block != 0 || s[1] != self.params.tensors[self.primary_pose.weight].shape()[0] {
            return Err(Error::Config(format!(
                "feature map {s:?} cannot be split into {} capsules of {}×{} poses plus activations",
                self.spec.n_caps, self.spec.pose_dim, self.spec.pose_dim
            )));
        }
        let (n, f, h, w) = (s[0], s[1], s[2], s[3]);
        let (caps, p) = (self.spec.n_caps, self.spec.pose_dim);
        let rows = features.permute(&[0, 2, 3, 1])?.reshape(&[n * h * w, f])?;
        let poses = rows
            .matmul(bound.get(self.primary_pose.weight))?
            .add(bound.get(self.primary_pose.bias))?
            .reshape(&[n, h, w, caps, p, p])?;
        let activations = rows
            .matmul(bound.get(self.primary_act.weight))?
            .add(bound.get(self.primary_act.bias))?
            .logistic()
            .reshape(&[n, h, w, caps])?;
        CapsuleTensor::new(poses, activations)
    }

    /// Routes each K×K window of lower capsules to the capsules at that position.
    pub fn conv_caps_forward<'t>(
        &self,
        layer: usize,
        bound: &BoundParams<'t>,
        input: CapsuleTensor<'t>,
    ) -> Result<(CapsuleTensor<'t>, usize)> {
        let ids = *self
            .conv_caps
            .get(layer)
            .ok_or_else(|| Error::Contract(format!("no convolutional capsule layer {layer}")))?;
        let (n, h, w, caps, p) = input.dims();
        let k = self.spec.caps_kernel;
        let geom = ConvGeometry::new(h, w, k, 1, k / 2)?;
        let (oh, ow) = (geom.out_h, geom.out_w);
        let lower = k * k * caps;
        let (pose_idx, act_idx) = window_index(&geom, n, caps, p * p);
        let b = n * oh * ow;
        let lower_poses = input.poses.gather(Rc::new(pose_idx), &[b, lower, p, p])?;
        let lower_acts = input.activations.gather(Rc::new(act_idx), &[b, lower])?;
        let higher = self.spec.n_caps;
        let votes = lower_poses
            .reshape(&[b, lower, 1, p, p])?
            .bmm(bound.get(ids.transform))?;
        let out = self.route_layer(ids, bound, votes, lower_acts, lower_poses)?;
        let caps_out = CapsuleTensor::new(
            out.poses.reshape(&[n, oh, ow, higher, p, p])?,
            out.activations.reshape(&[n, oh, ow, higher])?,
        )?;
        Ok((caps_out, out.state.precision_clamps))
    }

    /// Routes every capsule at every position to the class capsules, sharing
    /// one transform per lower capsule type.
    pub fn class_caps_forward<'t>(
        &self,
        bound: &BoundParams<'t>,
        input: CapsuleTensor<'t>,
    ) -> Result<(Var<'t>, Var<'t>, usize)> {
        let (n, h, w, caps, p) = input.dims();
        let g = h * w;
        let classes = self.spec.n_classes;
        let votes = input
            .poses
            .reshape(&[n, g, caps, 1, p, p])?
            .bmm(bound.get(self.class_caps.transform))?
            .reshape(&[n, g * caps, classes, p, p])?;
        let lower_poses = input.poses.reshape(&[n, g * caps, p, p])?;
        let lower_acts = input.activations.reshape(&[n, g * caps])?;
        let out = self.route_layer(self.class_caps, bound, votes, lower_acts, lower_poses)?;
        Ok((out.poses, out.activations, out.state.precision_clamps))
    }

    fn route_layer<'t>(
        &self,
        ids: CapsLayerIds,
        bound: &BoundParams<'t>,
        votes: Var<'t>,
        lower_acts: Var<'t>,
        lower_poses: Var<'t>,
    ) -> Result<crate::routing::RoutingOutput<'t>> {
        let params = match ids.route {
            RouteIds::None => RoutingParams::None,
            RouteIds::Scales { beta_a, beta_u } => RoutingParams::Scales(ActivationScales {
                beta_a: bound.get(beta_a),
                beta_u: bound.get(beta_u),
            }),
            RouteIds::SelfRouting { w_route } => RoutingParams::SelfRouting(SelfRoutingParams {
                w_route: bound.get(w_route),
            }),
        };
        let field = VoteField::new(votes, lower_acts)?;
        route(&field, lower_poses, params, &self.spec.routing)
    }

    /// Full forward pass over a batch of `N×C×H×W` images.
    pub fn forward<'t>(&self, bound: &BoundParams<'t>, images: Var<'t>) -> Result<NetworkOutput<'t>> {
        let features = self.backbone_forward(bound, images)?;
        let mut caps = self.primary_caps_forward(bound, features)?;
        let mut layers = vec![LayerActivity {
            kind: LayerKind::Primary,
            activations: caps.activations,
        }];
        let mut routing_instances = 0;
        let mut precision_clamps = 0;
        for l in 0..self.conv_caps.len() {
            let (next, clamps) = self.conv_caps_forward(l, bound, caps)?;
            routing_instances += 1;
            precision_clamps += clamps;
            caps = next;
            layers.push(LayerActivity {
                kind: LayerKind::ConvCaps,
                activations: caps.activations,
            });
        }
        let (class_poses, class_activations, clamps) = self.class_caps_forward(bound, caps)?;
        routing_instances += 1;
        precision_clamps += clamps;
        let n = class_activations.shape()[0];
        layers.push(LayerActivity {
            kind: LayerKind::ClassCaps,
            activations: class_activations.reshape(&[n, 1, 1, self.spec.n_classes])?,
        });
        Ok(NetworkOutput {
            class_poses,
            class_activations,
            layers,
            routing_instances,
            precision_clamps,
        })
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let out = self.forward(&bound, tape.constant(images.clone()))?;
        Ok(out.predictions())
    }
}

/// Gather indices collecting the K×K neighbourhood of capsules around each
/// output position (zero outside the grid) for poses and activations.
fn window_index(geom: &ConvGeometry, n: usize, caps: usize, p2: usize) -> (Vec<usize>, Vec<usize>) {
    let k = geom.kernel;
    let plane = geom.in_h * geom.in_w;
    let positions = n * geom.out_h * geom.out_w;
    let mut poses = Vec::with_capacity(positions * k * k * caps * p2);
    let mut acts = Vec::with_capacity(positions * k * k * caps);
    for b in 0..n {
        for oy in 0..geom.out_h {
            for ox in 0..geom.out_w {
                for ky in 0..k {
                    for kx in 0..k {
                        let cell = geom.tap(oy, ox, ky, kx).map(|t| b * plane + t);
                        for c in 0..caps {
                            match cell {
                                Some(cell) => {
                                    let a = cell * caps + c;
                                    acts.push(a);
                                    poses.extend((0..p2).map(|e| a * p2 + e));
                                }
                                None => {
                                    acts.push(PAD);
                                    poses.extend(std::iter::repeat_n(PAD, p2));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (poses, acts)
}
