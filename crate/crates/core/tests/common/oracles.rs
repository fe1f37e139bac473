//! Unoptimised loop implementations of the four routing procedures, written
//! directly from the update equations with no shared code.

use capsnet::routing::{
    route, ActivationScales, RoutingAlgorithm, RoutingConfig, RoutingParams, SelfRoutingParams, VoteField,
};
use capsnet::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Routing inputs as flat row-major arrays.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub b: usize,
    pub l: usize,
    pub h: usize,
    /// Pose side P; votes have P·P entries.
    pub p: usize,
    /// `[b][l][h][p·p]`
    pub votes: Vec<f64>,
    /// `[b][l]`
    pub acts: Vec<f64>,
    /// `[b][l][p·p]`
    pub poses: Vec<f64>,
    /// `[types][p·p][h]`
    pub w_route: Vec<f64>,
    pub types: usize,
    pub beta_a: f64,
    pub beta_u: f64,
}

impl Fixture {
    pub fn random(seed: u64, b: usize, l: usize, h: usize, p: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = p * p;
        let mut draw = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        Fixture {
            b,
            l,
            h,
            p,
            votes: draw(b * l * h * d, -1.0, 1.0),
            acts: draw(b * l, 0.0, 1.0),
            poses: draw(b * l * d, -1.0, 1.0),
            w_route: draw(l * d * h, -1.0, 1.0),
            types: l,
            beta_a: 1.0,
            beta_u: 0.5,
        }
    }

    pub fn d(&self) -> usize {
        self.p * self.p
    }

    fn vote(&self, bi: usize, i: usize, j: usize) -> &[f64] {
        let d = self.d();
        let at = ((bi * self.l + i) * self.h + j) * d;
        &self.votes[at..at + d]
    }

    fn act(&self, bi: usize, i: usize) -> f64 {
        self.acts[bi * self.l + i]
    }
}

/// Outputs flattened like the library's: poses `[b][h][p·p]`, activations
/// `[b][h]`, couplings `[iteration][b][l][h]`.
#[derive(Clone, Debug, Default)]
pub struct Routed {
    pub poses: Vec<f64>,
    pub acts: Vec<f64>,
    pub couplings: Vec<Vec<f64>>,
}

impl Routed {
    fn new(f: &Fixture) -> Self {
        Routed {
            poses: vec![0.0; f.b * f.h * f.d()],
            acts: vec![0.0; f.b * f.h],
            couplings: Vec::new(),
        }
    }

    fn record(&mut self, it: usize, bi: usize, f: &Fixture, c: &[Vec<f64>]) {
        if self.couplings.len() <= it {
            self.couplings.push(vec![0.0; f.b * f.l * f.h]);
        }
        for i in 0..f.l {
            for j in 0..f.h {
                self.couplings[it][(bi * f.l + i) * f.h + j] = c[i][j];
            }
        }
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn dynamic(f: &Fixture, r: usize, eps: f64) -> Routed {
    let d = f.d();
    let mut out = Routed::new(f);
    for bi in 0..f.b {
        let mut logits = vec![vec![0.0; f.h]; f.l];
        for it in 0..r {
            let c: Vec<Vec<f64>> = logits.iter().map(|row| softmax(row)).collect();
            out.record(it, bi, f, &c);
            let mut v = vec![vec![0.0; d]; f.h];
            for j in 0..f.h {
                let mut s = vec![0.0; d];
                for i in 0..f.l {
                    for k in 0..d {
                        s[k] += c[i][j] * f.vote(bi, i, j)[k];
                    }
                }
                let n2: f64 = s.iter().map(|x| x * x).sum();
                for k in 0..d {
                    v[j][k] = n2 / (1.0 + n2) * s[k] / (n2 + eps).sqrt();
                }
            }
            if it + 1 < r {
                for i in 0..f.l {
                    for j in 0..f.h {
                        logits[i][j] += (0..d).map(|k| f.vote(bi, i, j)[k] * v[j][k]).sum::<f64>();
                    }
                }
            }
            if it + 1 == r {
                for j in 0..f.h {
                    out.poses[(bi * f.h + j) * d..(bi * f.h + j + 1) * d].copy_from_slice(&v[j]);
                    out.acts[bi * f.h + j] = v[j].iter().map(|x| x * x).sum::<f64>().sqrt();
                }
            }
        }
    }
    out
}

pub fn em(f: &Fixture, r: usize, eps: f64) -> Routed {
    let d = f.d();
    let mut out = Routed::new(f);
    for bi in 0..f.b {
        let mut resp = vec![vec![1.0 / f.h as f64; f.h]; f.l];
        for it in 0..r {
            out.record(it, bi, f, &resp);
            let mut mu = vec![vec![0.0; d]; f.h];
            let mut mass = vec![0.0; f.h];
            for j in 0..f.h {
                for i in 0..f.l {
                    let w = resp[i][j] * f.act(bi, i);
                    mass[j] += w;
                    for k in 0..d {
                        mu[j][k] += w * f.vote(bi, i, j)[k];
                    }
                }
                mass[j] += eps;
                for k in 0..d {
                    mu[j][k] /= mass[j];
                }
            }
            let dist = |i: usize, j: usize| -> f64 {
                (0..d).map(|k| (f.vote(bi, i, j)[k] - mu[j][k]).powi(2)).sum()
            };
            if it + 1 < r {
                for (i, row) in resp.iter_mut().enumerate() {
                    let neg: Vec<f64> = (0..f.h).map(|j| -dist(i, j)).collect();
                    *row = softmax(&neg);
                }
            } else {
                for j in 0..f.h {
                    let cost: f64 = (0..f.l).map(|i| resp[i][j] * f.act(bi, i) * dist(i, j)).sum::<f64>() / mass[j];
                    out.acts[bi * f.h + j] = sigmoid(f.beta_a - f.beta_u * cost);
                    out.poses[(bi * f.h + j) * d..(bi * f.h + j + 1) * d].copy_from_slice(&mu[j]);
                }
            }
        }
    }
    out
}

/// Also returns the final mixing weights `[b][h]` and precisions `[b][h][p·p]`.
pub fn vb(f: &Fixture, r: usize, eps: f64) -> (Routed, Vec<f64>, Vec<f64>) {
    let d = f.d();
    let mut out = Routed::new(f);
    let mut mixing = vec![0.0; f.b * f.h];
    let mut precisions = vec![0.0; f.b * f.h * d];
    for bi in 0..f.b {
        let mut gamma = vec![vec![1.0 / f.h as f64; f.h]; f.l];
        for it in 0..r {
            out.record(it, bi, f, &gamma);
            let gw: Vec<Vec<f64>> = (0..f.l).map(|i| (0..f.h).map(|j| gamma[i][j] * f.act(bi, i)).collect()).collect();
            let n: Vec<f64> = (0..f.h).map(|j| (0..f.l).map(|i| gw[i][j]).sum()).collect();
            let total: f64 = n.iter().sum::<f64>() + f.h as f64;
            let mut mu = vec![vec![0.0; d]; f.h];
            let mut lam = vec![vec![0.0; d]; f.h];
            let mut ln_pi = vec![0.0; f.h];
            let mut ln_det = vec![0.0; f.h];
            for j in 0..f.h {
                for k in 0..d {
                    let s: f64 = (0..f.l).map(|i| gw[i][j] * f.vote(bi, i, j)[k]).sum();
                    mu[j][k] = s / (n[j] + eps);
                }
                for k in 0..d {
                    let sc: f64 = (0..f.l).map(|i| gw[i][j] * (f.vote(bi, i, j)[k] - mu[j][k]).powi(2)).sum();
                    lam[j][k] = ((n[j] + 1.0) / (sc + 1.0)).max(eps);
                }
                ln_pi[j] = ((n[j] + 1.0) / total).ln();
                ln_det[j] = lam[j].iter().map(|x| x.ln()).sum();
            }
            if it + 1 < r {
                for i in 0..f.l {
                    let log_rho: Vec<f64> = (0..f.h)
                        .map(|j| {
                            let maha: f64 = (0..d).map(|k| lam[j][k] * (f.vote(bi, i, j)[k] - mu[j][k]).powi(2)).sum();
                            ln_pi[j] + 0.5 * ln_det[j] - 0.5 * maha
                        })
                        .collect();
                    gamma[i] = softmax(&log_rho);
                }
            } else {
                for j in 0..f.h {
                    out.acts[bi * f.h + j] = sigmoid(f.beta_a - (f.beta_u + ln_pi[j] + ln_det[j]));
                    out.poses[(bi * f.h + j) * d..(bi * f.h + j + 1) * d].copy_from_slice(&mu[j]);
                    mixing[bi * f.h + j] = ln_pi[j].exp();
                    precisions[(bi * f.h + j) * d..(bi * f.h + j + 1) * d].copy_from_slice(&lam[j]);
                }
            }
        }
    }
    (out, mixing, precisions)
}

pub fn self_routing(f: &Fixture, eps: f64) -> Routed {
    let d = f.d();
    let mut out = Routed::new(f);
    for bi in 0..f.b {
        let c: Vec<Vec<f64>> = (0..f.l)
            .map(|i| {
                let t = i % f.types;
                let u = &f.poses[(bi * f.l + i) * d..(bi * f.l + i + 1) * d];
                let logits: Vec<f64> = (0..f.h)
                    .map(|j| (0..d).map(|k| u[k] * f.w_route[(t * d + k) * f.h + j]).sum())
                    .collect();
                softmax(&logits)
            })
            .collect();
        out.record(0, bi, f, &c);
        let act_sum: f64 = (0..f.l).map(|i| f.act(bi, i)).sum();
        for j in 0..f.h {
            let mass: f64 = (0..f.l).map(|i| c[i][j] * f.act(bi, i)).sum();
            out.acts[bi * f.h + j] = mass / (act_sum + eps);
            for k in 0..d {
                let s: f64 = (0..f.l).map(|i| c[i][j] * f.act(bi, i) * f.vote(bi, i, j)[k]).sum();
                out.poses[(bi * f.h + j) * d + k] = s / (mass + eps);
            }
        }
    }
    out
}

/// The library's result on the same fixture, in the oracle layout, plus the
/// VB mixing weights and precisions when applicable.
pub fn library(f: &Fixture, alg: RoutingAlgorithm, r: usize, eps: f64) -> (Routed, Option<(Vec<f64>, Vec<f64>)>) {
    let tape = Tape::new();
    let t = |shape: &[usize], data: &Vec<f64>| tape.constant(Tensor::new(shape, data.clone()).unwrap());
    let votes = t(&[f.b, f.l, f.h, f.p, f.p], &f.votes);
    let acts = t(&[f.b, f.l], &f.acts);
    let poses = t(&[f.b, f.l, f.p, f.p], &f.poses);
    let w_route = t(&[f.types, f.d(), f.h], &f.w_route);
    let params = match alg {
        RoutingAlgorithm::Dynamic => RoutingParams::None,
        RoutingAlgorithm::SelfRouting => RoutingParams::SelfRouting(SelfRoutingParams { w_route }),
        _ => RoutingParams::Scales(ActivationScales {
            beta_a: tape.scalar(f.beta_a),
            beta_u: tape.scalar(f.beta_u),
        }),
    };
    let mut cfg = RoutingConfig::new(alg).with_iterations(r);
    cfg.epsilon = eps;
    let field = VoteField::new(votes, acts).unwrap();
    let out = route(&field, poses, params, &cfg).unwrap();
    let vb = out
        .state
        .vb_posterior
        .map(|p| (p.mixing.value().data().to_vec(), p.precisions.value().data().to_vec()));
    (
        Routed {
            poses: out.poses.value().data().to_vec(),
            acts: out.activations.value().data().to_vec(),
            couplings: out.state.couplings.iter().map(|c| c.value().data().to_vec()).collect(),
        },
        vb,
    )
}

pub fn oracle(f: &Fixture, alg: RoutingAlgorithm, r: usize, eps: f64) -> (Routed, Option<(Vec<f64>, Vec<f64>)>) {
    match alg {
        RoutingAlgorithm::Dynamic => (dynamic(f, r, eps), None),
        RoutingAlgorithm::Em => (em(f, r, eps), None),
        RoutingAlgorithm::Vb => {
            let (o, m, p) = vb(f, r, eps);
            (o, Some((m, p)))
        }
        RoutingAlgorithm::SelfRouting => (self_routing(f, eps), None),
    }
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest discrepancy between library and oracle across every output.
pub fn discrepancy(f: &Fixture, alg: RoutingAlgorithm, r: usize, eps: f64) -> f64 {
    let (lib, lib_vb) = library(f, alg, r, eps);
    let (ora, ora_vb) = oracle(f, alg, r, eps);
    let mut worst = max_diff(&lib.poses, &ora.poses).max(max_diff(&lib.acts, &ora.acts));
    assert_eq!(lib.couplings.len(), ora.couplings.len(), "{alg}: iteration count");
    for (a, b) in lib.couplings.iter().zip(&ora.couplings) {
        worst = worst.max(max_diff(a, b));
    }
    if let (Some((lm, lp)), Some((om, op))) = (lib_vb, ora_vb) {
        worst = worst.max(max_diff(&lm, &om)).max(max_diff(&lp, &op));
    }
    worst
}
