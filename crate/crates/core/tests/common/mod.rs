//! Explicit-loop reference implementations and randomized case runners
//! shared by the oracle tests and the acceptance report.

#![allow(dead_code)]

use mcinet::config::Aggregate;
use mcinet::mcfm::{cross_attention, AttentionWeights};
use mcinet::mlim::{mask_aggregate, multihead_correlation, refine_correlation, ProjectorWeights, RefinerStageWeights};
use mcinet_autodiff::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ORACLE_CASES: usize = 60;
pub const ORACLE_TOL: f64 = 1e-5;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

pub fn rand_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(vec![h, w], |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `y[o, p] = b[o] + Σ_c w[o, c] x[c, p]` for a `[O, C, 1, 1]` weight.
pub fn pointwise(w: &Tensor, b: &Tensor, x: &[f64], positions: usize) -> Vec<f64> {
    let (o, c) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![0.0; o * positions];
    for oi in 0..o {
        for p in 0..positions {
            let mut acc = b.data()[oi];
            for ci in 0..c {
                acc += w.data()[oi * c + ci] * x[ci * positions + p];
            }
            y[oi * positions + p] = acc;
        }
    }
    y
}

/// Zero-padded "same" 2D convolution with stride 1 and dilation 1 over a
/// `[C, H, W]` array.
pub fn conv_same(x: &[f64], c: usize, h: usize, w: usize, weight: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (o, k) = (weight.shape()[0], weight.shape()[2]);
    let pad = (k / 2) as isize;
    let mut y = vec![0.0; o * h * w];
    for oi in 0..o {
        for yy in 0..h {
            for xx in 0..w {
                let mut acc = bias.data()[oi];
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = yy as isize + ky as isize - pad;
                            let sx = xx as isize + kx as isize - pad;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += weight.at(&[oi, ci, ky, kx]) * x[(ci * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                y[(oi * h + yy) * w + xx] = acc;
            }
        }
    }
    y
}

pub fn correlation_oracle(fs: &Tensor, fq: &Tensor, w: &Tensor, b: &Tensor, heads: usize) -> Vec<f64> {
    let (h, wd) = (fs.shape()[2], fs.shape()[3]);
    let hw = h * wd;
    let dh = w.shape()[0] / heads;
    let ps = pointwise(w, b, fs.data(), hw);
    let pq = pointwise(w, b, fq.data(), hw);
    let mut out = vec![0.0; heads * hw * hw];
    for head in 0..heads {
        for q in 0..hw {
            for s in 0..hw {
                let mut acc = 0.0;
                for d in 0..dh {
                    let ch = head * dh + d;
                    acc += pq[ch * hw + q] * ps[ch * hw + s];
                }
                out[(head * hw + q) * hw + s] = acc;
            }
        }
    }
    out
}

/// One random multi-head correlation case; returns the max deviation.
pub fn correlation_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..5));
    let heads = rng.random_range(1..4);
    let dh = rng.random_range(1..4);
    let fs = rand_tensor(&mut rng, &[1, c, h, w]);
    let fq = rand_tensor(&mut rng, &[1, c, h, w]);
    let wt = rand_tensor(&mut rng, &[heads * dh, c, 1, 1]);
    let bt = rand_tensor(&mut rng, &[heads * dh]);
    let mut g = Graph::new();
    let proj = ProjectorWeights {
        weight: g.constant(wt.clone()),
        bias: g.constant(bt.clone()),
        heads,
    };
    let (vs, vq) = (g.constant(fs.clone()), g.constant(fq.clone()));
    let out = multihead_correlation(&mut g, vs, vq, &proj).unwrap();
    assert_eq!(g.shape(out), &[heads, h, w, h, w]);
    max_diff(g.value(out).data(), &correlation_oracle(&fs, &fq, &wt, &bt, heads))
}

pub struct StageTensors {
    pub support_w: Tensor,
    pub support_b: Tensor,
    pub query_w: Tensor,
    pub query_b: Tensor,
}

/// Separable refinement by explicit loops: for each stage, a 2D conv over
/// support dims per query position, then over query dims per support
/// position, ReLU between stages.
pub fn refine_oracle(vol: &Tensor, stages: &[StageTensors]) -> Vec<f64> {
    let sh = vol.shape();
    let (mut p, hq, wq, hs, ws) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    let (nq, ns) = (hq * wq, hs * ws);
    // Working layout [ch, q, s].
    let mut x = vol.data().to_vec();
    for (k, st) in stages.iter().enumerate() {
        let co = st.support_w.shape()[0];
        let mut mid = vec![0.0; co * nq * ns];
        for q in 0..nq {
            let slice: Vec<f64> = (0..p).flat_map(|c| (0..ns).map(move |s| (c, s))).map(|(c, s)| x[(c * nq + q) * ns + s]).collect();
            let y = conv_same(&slice, p, hs, ws, &st.support_w, &st.support_b);
            for c in 0..co {
                for s in 0..ns {
                    mid[(c * nq + q) * ns + s] = y[c * ns + s];
                }
            }
        }
        let co2 = st.query_w.shape()[0];
        let mut out = vec![0.0; co2 * nq * ns];
        for s in 0..ns {
            let slice: Vec<f64> = (0..co).flat_map(|c| (0..nq).map(move |q| (c, q))).map(|(c, q)| mid[(c * nq + q) * ns + s]).collect();
            let y = conv_same(&slice, co, hq, wq, &st.query_w, &st.query_b);
            for c in 0..co2 {
                for q in 0..nq {
                    let v = y[c * nq + q];
                    out[(c * nq + q) * ns + s] = if k + 1 < stages.len() { v.max(0.0) } else { v };
                }
            }
        }
        x = out;
        p = co2;
    }
    x
}

pub fn refine_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.random_range(1..4);
    let (hq, wq, hs, ws) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
    let depth = rng.random_range(1..3);
    let kern = if rng.random_bool(0.5) { 1 } else { 3 };
    let vol = rand_tensor(&mut rng, &[p, hq, wq, hs, ws]);
    let mut cin = p;
    let stages: Vec<StageTensors> = (0..depth)
        .map(|_| {
            let w = rng.random_range(1..4);
            let st = StageTensors {
                support_w: rand_tensor(&mut rng, &[w, cin, kern, kern]),
                support_b: rand_tensor(&mut rng, &[w]),
                query_w: rand_tensor(&mut rng, &[w, w, kern, kern]),
                query_b: rand_tensor(&mut rng, &[w]),
            };
            cin = w;
            st
        })
        .collect();
    let mut g = Graph::new();
    let handles: Vec<RefinerStageWeights> = stages
        .iter()
        .map(|st| RefinerStageWeights {
            support_w: g.constant(st.support_w.clone()),
            support_b: g.constant(st.support_b.clone()),
            query_w: g.constant(st.query_w.clone()),
            query_b: g.constant(st.query_b.clone()),
        })
        .collect();
    let v = g.constant(vol.clone());
    let out = refine_correlation(&mut g, v, &handles, p).unwrap();
    assert_eq!(g.shape(out), &[cin, hq, wq, hs, ws]);
    max_diff(g.value(out).data(), &refine_oracle(&vol, &stages))
}

/// Softmax over support positions, then the mask-weighted sum.
pub fn aggregate_oracle(vol: &Tensor, mask: &Tensor, mode: Aggregate) -> Vec<f64> {
    let sh = vol.shape();
    let (c, nq, ns) = (sh[0], sh[1] * sh[2], sh[3] * sh[4]);
    let mut out = vec![0.0; c * nq];
    for ci in 0..c {
        for q in 0..nq {
            let row = &vol.data()[(ci * nq + q) * ns..(ci * nq + q + 1) * ns];
            out[ci * nq + q] = match mode {
                Aggregate::Softmax => {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    row.iter().zip(mask.data()).map(|(v, mk)| (v - m).exp() / z * mk).sum()
                }
                Aggregate::Raw => row.iter().zip(mask.data()).map(|(v, mk)| v * mk).sum::<f64>() / ns as f64,
            };
        }
    }
    out
}

pub fn aggregate_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(1..4);
    let (hq, wq, hs, ws) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5));
    let mode = if rng.random_bool(0.75) { Aggregate::Softmax } else { Aggregate::Raw };
    let vol = Tensor::from_fn(vec![c, hq, wq, hs, ws], |_| rng.random_range(-4.0..4.0));
    let mask = Tensor::from_fn(vec![hs, ws], |_| rng.random_range(0.0..1.0));
    let mut g = Graph::new();
    let v = g.constant(vol.clone());
    let out = mask_aggregate(&mut g, v, &mask, mode).unwrap();
    assert_eq!(g.shape(out), &[1, c, hq, wq]);
    max_diff(g.value(out).data(), &aggregate_oracle(&vol, &mask, mode))
}

pub struct AttentionTensors {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
}

impl AttentionTensors {
    pub fn random(rng: &mut ChaCha8Rng, c1: usize, c2: usize, d: usize) -> Self {
        Self {
            wq: rand_tensor(rng, &[d, c1, 1, 1]),
            bq: rand_tensor(rng, &[d]),
            wk: rand_tensor(rng, &[d, c2, 1, 1]),
            bk: rand_tensor(rng, &[d]),
            wv: rand_tensor(rng, &[c1, c2, 1, 1]),
            bv: rand_tensor(rng, &[c1]),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> AttentionWeights {
        AttentionWeights {
            wq: g.constant(self.wq.clone()),
            bq: g.constant(self.bq.clone()),
            wk: g.constant(self.wk.clone()),
            bk: g.constant(self.bk.clone()),
            wv: g.constant(self.wv.clone()),
            bv: g.constant(self.bv.clone()),
        }
    }
}

/// Token-by-token scaled dot-product attention with a residual.
pub fn attention_oracle(q: &Tensor, kv: &Tensor, w: &AttentionTensors, d: usize) -> Vec<f64> {
    let (c1, hw) = (q.shape()[1], q.shape()[2] * q.shape()[3]);
    let pq = pointwise(&w.wq, &w.bq, q.data(), hw);
    let pk = pointwise(&w.wk, &w.bk, kv.data(), hw);
    let pv = pointwise(&w.wv, &w.bv, kv.data(), hw);
    let mut out = q.data().to_vec();
    for i in 0..hw {
        let scores: Vec<f64> = (0..hw)
            .map(|j| (0..d).map(|k| pq[k * hw + i] * pk[k * hw + j]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        for c in 0..c1 {
            let mixed: f64 = (0..hw).map(|j| (scores[j] - m).exp() / z * pv[c * hw + j]).sum();
            out[c * hw + i] += mixed;
        }
    }
    out
}

pub fn attention_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c1, c2, d) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..4));
    let (h, w) = (rng.random_range(1..4), rng.random_range(1..4));
    let q = rand_tensor(&mut rng, &[1, c1, h, w]);
    let kv = rand_tensor(&mut rng, &[1, c2, h, w]);
    let wt = AttentionTensors::random(&mut rng, c1, c2, d);
    let mut g = Graph::new();
    let handles = wt.bind(&mut g);
    let (vq, vkv) = (g.constant(q.clone()), g.constant(kv.clone()));
    let out = cross_attention(&mut g, vq, vkv, &handles, d).unwrap();
    max_diff(g.value(out.out).data(), &attention_oracle(&q, &kv, &wt, d))
}

/// Worst deviation over `n` seeded cases of `case`.
pub fn worst_case(n: usize, case: fn(u64) -> f64) -> f64 {
    (0..n as u64).map(case).fold(0.0, f64::max)
}
