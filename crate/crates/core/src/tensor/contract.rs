//! Fused contractions over vote fields.
//!
//! Votes are laid out `B × L × H × D` (batch, lower capsules, higher
//! capsules, pose length). Per-pair weights are `B × L × H` and per-cluster
//! statistics are `B × H × D`. Each op records a single tape node, which keeps
//! routing from materialising vote-sized temporaries.

use super::dense::Tensor;
use super::tape::Var;
use crate::error::TensorError;

#[derive(Clone, Copy)]
struct Dims {
    b: usize,
    l: usize,
    h: usize,
    d: usize,
}

impl Dims {
    fn of_votes(op: &'static str, votes: &Tensor) -> Result<Dims, TensorError> {
        match *votes.shape() {
            [b, l, h, d] => Ok(Dims { b, l, h, d }),
            _ => Err(TensorError::Shape {
                op,
                lhs: votes.shape().to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn expect(&self, op: &'static str, t: &Tensor, want: &[usize]) -> Result<(), TensorError> {
        if t.shape() == want {
            Ok(())
        } else {
            Err(TensorError::Shape {
                op,
                lhs: t.shape().to_vec(),
                rhs: want.to_vec(),
            })
        }
    }

    fn pair(&self) -> [usize; 3] {
        [self.b, self.l, self.h]
    }

    fn cluster(&self) -> [usize; 3] {
        [self.b, self.h, self.d]
    }

    /// Visits every (pair index, vote row offset, cluster row offset).
    fn each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let mut pair = 0;
        for bi in 0..self.b {
            for _ in 0..self.l {
                for hi in 0..self.h {
                    f(pair, pair * self.d, (bi * self.h + hi) * self.d);
                    pair += 1;
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// `out[b,h,:] = Σ_l w[b,l,h] · votes[b,l,h,:]` with `self` as `w`.
    pub fn vote_sum(self, votes: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (w, v) = (self.value(), votes.value());
        let dm = Dims::of_votes("vote_sum", &v)?;
        dm.expect("vote_sum", &w, &dm.pair())?;
        let d = dm.d;
        let mut out = vec![0.0; dm.b * dm.h * d];
        let (wd, vd) = (w.data(), v.data());
        dm.each(|p, vo, co| {
            let wp = wd[p];
            out[co..co + d]
                .iter_mut()
                .zip(&vd[vo..vo + d])
                .for_each(|(o, x)| *o += wp * x);
        });
        let value = Tensor::from_parts(dm.cluster().to_vec(), out);
        Ok(self.tape.push(value, &[self, votes], move |g, need| {
            let (wd, vd) = (w.data(), v.data());
            let mut gw = need[0].then(|| vec![0.0; wd.len()]);
            let mut gv = need[1].then(|| vec![0.0; vd.len()]);
            dm.each(|p, vo, co| {
                let gc = &g[co..co + d];
                if let Some(gw) = gw.as_mut() {
                    gw[p] = gc.iter().zip(&vd[vo..vo + d]).map(|(a, b)| a * b).sum();
                }
                if let Some(gv) = gv.as_mut() {
                    let wp = wd[p];
                    gv[vo..vo + d].iter_mut().zip(gc).for_each(|(o, x)| *o = wp * x);
                }
            });
            vec![gw, gv]
        }))
    }

    /// `out[b,l,h] = ⟨votes[b,l,h,:], u[b,h,:]⟩` with `self` as `votes`.
    pub fn vote_dot(self, u: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (v, uv) = (self.value(), u.value());
        let dm = Dims::of_votes("vote_dot", &v)?;
        dm.expect("vote_dot", &uv, &dm.cluster())?;
        let d = dm.d;
        let mut out = vec![0.0; dm.b * dm.l * dm.h];
        let (vd, ud) = (v.data(), uv.data());
        dm.each(|p, vo, co| {
            out[p] = vd[vo..vo + d].iter().zip(&ud[co..co + d]).map(|(a, b)| a * b).sum();
        });
        let value = Tensor::from_parts(dm.pair().to_vec(), out);
        Ok(self.tape.push(value, &[self, u], move |g, need| {
            let (vd, ud) = (v.data(), uv.data());
            let mut gv = need[0].then(|| vec![0.0; vd.len()]);
            let mut gu = need[1].then(|| vec![0.0; ud.len()]);
            dm.each(|p, vo, co| {
                let gp = g[p];
                if let Some(gv) = gv.as_mut() {
                    gv[vo..vo + d].iter_mut().zip(&ud[co..co + d]).for_each(|(o, x)| *o = gp * x);
                }
                if let Some(gu) = gu.as_mut() {
                    gu[co..co + d].iter_mut().zip(&vd[vo..vo + d]).for_each(|(o, x)| *o += gp * x);
                }
            });
            vec![gv, gu]
        }))
    }

    /// `out[b,l,h] = Σ_d Λ[b,h,d] (votes[b,l,h,d] − μ[b,h,d])²` with `self` as
    /// `votes`; `Λ` defaults to one.
    pub fn vote_sq_dist(self, mu: Var<'t>, precision: Option<Var<'t>>) -> Result<Var<'t>, TensorError> {
        let (v, m) = (self.value(), mu.value());
        let dm = Dims::of_votes("vote_sq_dist", &v)?;
        dm.expect("vote_sq_dist", &m, &dm.cluster())?;
        let lam = precision.map(|p| p.value());
        if let Some(lam) = &lam {
            dm.expect("vote_sq_dist", lam, &dm.cluster())?;
        }
        let d = dm.d;
        let mut out = vec![0.0; dm.b * dm.l * dm.h];
        {
            let (vd, md) = (v.data(), m.data());
            let ld = lam.as_ref().map(|t| t.data());
            dm.each(|p, vo, co| {
                let mut s = 0.0;
                for k in 0..d {
                    let e = vd[vo + k] - md[co + k];
                    s += ld.map_or(1.0, |l| l[co + k]) * e * e;
                }
                out[p] = s;
            });
        }
        let value = Tensor::from_parts(dm.pair().to_vec(), out);
        let mut inputs = vec![self, mu];
        inputs.extend(precision);
        Ok(self.tape.push(value, &inputs, move |g, need| {
            let (vd, md) = (v.data(), m.data());
            let ld = lam.as_ref().map(|t| t.data());
            let mut gv = need[0].then(|| vec![0.0; vd.len()]);
            let mut gm = need[1].then(|| vec![0.0; md.len()]);
            let mut gl = need.get(2).copied().unwrap_or(false).then(|| vec![0.0; md.len()]);
            dm.each(|p, vo, co| {
                let gp = g[p];
                for k in 0..d {
                    let e = vd[vo + k] - md[co + k];
                    let lk = ld.map_or(1.0, |l| l[co + k]);
                    let de = 2.0 * gp * lk * e;
                    if let Some(gv) = gv.as_mut() {
                        gv[vo + k] = de;
                    }
                    if let Some(gm) = gm.as_mut() {
                        gm[co + k] -= de;
                    }
                    if let Some(gl) = gl.as_mut() {
                        gl[co + k] += gp * e * e;
                    }
                }
            });
            let mut grads = vec![gv, gm];
            if ld.is_some() {
                grads.push(gl);
            }
            grads
        }))
    }

    /// `out[b,h,d] = Σ_l w[b,l,h] (votes[b,l,h,d] − μ[b,h,d])²` with `self` as `w`.
    pub fn vote_scatter(self, votes: Var<'t>, mu: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (w, v, m) = (self.value(), votes.value(), mu.value());
        let dm = Dims::of_votes("vote_scatter", &v)?;
        dm.expect("vote_scatter", &w, &dm.pair())?;
        dm.expect("vote_scatter", &m, &dm.cluster())?;
        let d = dm.d;
        let mut out = vec![0.0; dm.b * dm.h * d];
        {
            let (wd, vd, md) = (w.data(), v.data(), m.data());
            dm.each(|p, vo, co| {
                let wp = wd[p];
                for k in 0..d {
                    let e = vd[vo + k] - md[co + k];
                    out[co + k] += wp * e * e;
                }
            });
        }
        let value = Tensor::from_parts(dm.cluster().to_vec(), out);
        Ok(self.tape.push(value, &[self, votes, mu], move |g, need| {
            let (wd, vd, md) = (w.data(), v.data(), m.data());
            let mut gw = need[0].then(|| vec![0.0; wd.len()]);
            let mut gv = need[1].then(|| vec![0.0; vd.len()]);
            let mut gm = need[2].then(|| vec![0.0; md.len()]);
            dm.each(|p, vo, co| {
                let wp = wd[p];
                let mut acc = 0.0;
                for k in 0..d {
                    let e = vd[vo + k] - md[co + k];
                    let gk = g[co + k];
                    acc += gk * e * e;
                    let de = 2.0 * wp * e * gk;
                    if let Some(gv) = gv.as_mut() {
                        gv[vo + k] = de;
                    }
                    if let Some(gm) = gm.as_mut() {
                        gm[co + k] -= de;
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    gw[p] = acc;
                }
            });
            vec![gw, gv, gm]
        }))
    }
}
