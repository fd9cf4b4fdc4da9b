//! Independent double-precision reimplementation of the full forward path,
//! used as a reference for gradients and losses.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::HashMap;

use xsmoe_core::model::{FeatureStack, SideNetwork};
use xsmoe_core::numerics::ParamId;
use xsmoe_core::seqrec::{Block, LayerNorm, Linear, SeqEncoder};
use xsmoe_core::{Modality, Tensor, XsmoeModel};

/// Row-major `f64` matrix.
#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub v: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, v: vec![0.0; rows * cols] }
    }

    pub fn from_f32(rows: usize, cols: usize, v: &[f32]) -> Self {
        assert_eq!(v.len(), rows * cols);
        Mat { rows, cols, v: v.iter().map(|&x| x as f64).collect() }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.v[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.v[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · wᵀ` where `w` is `[out, in]`.
    pub fn times_t(&self, w: &Mat) -> Mat {
        assert_eq!(self.cols, w.cols);
        let mut out = Mat::zeros(self.rows, w.rows);
        for i in 0..self.rows {
            for j in 0..w.rows {
                out.v[i * w.rows + j] = self.row(i).iter().zip(w.row(j)).map(|(a, b)| a * b).sum();
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, v: self.v.iter().map(|&x| f(x)).collect() }
    }

    pub fn add(&self, o: &Mat) -> Mat {
        assert_eq!(self.v.len(), o.v.len());
        Mat { rows: self.rows, cols: self.cols, v: self.v.iter().zip(&o.v).map(|(a, b)| a + b).collect() }
    }

    pub fn add_row_vec(&self, b: &[f64]) -> Mat {
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.v[r * self.cols + c] += b[c];
            }
        }
        out
    }
}

pub fn erf64(x: f64) -> f64 {
    libm::erf(x)
}

pub fn gelu64(x: f64) -> f64 {
    0.5 * x * (1.0 + erf64(x / std::f64::consts::SQRT_2))
}

/// Masked softmax; a fully masked row becomes zeros.
pub fn softmax64(row: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let max = (0..row.len()).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; row.len()];
    }
    let e: Vec<f64> = (0..row.len()).map(|j| if keep(j) { (row[j] - max).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Parameter values in double precision, with optional per-tensor overrides
/// for finite differencing.
pub struct Params {
    pub overrides: HashMap<ParamId, Vec<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Params { overrides: HashMap::new() }
    }

    pub fn mat(&self, t: &Tensor) -> Mat {
        let (rows, cols) = match t.shape() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => panic!("unexpected shape {s:?}"),
        };
        match self.overrides.get(&t.id()) {
            Some(v) => Mat { rows, cols, v: v.clone() },
            None => Mat::from_f32(rows, cols, t.data()),
        }
    }

    pub fn vec(&self, t: &Tensor) -> Vec<f64> {
        self.mat(t).v
    }
}

fn stack_layer(stack: &FeatureStack, k: usize) -> Mat {
    Mat::from_f32(stack.rows, stack.dim, &stack.layers[k])
}

pub fn side_forward(net: &SideNetwork, stack: &FeatureStack, p: &Params) -> Mat {
    let mut h = stack_layer(stack, 0);
    for (i, layer) in net.layers.iter().enumerate() {
        let bb = stack_layer(stack, net.group_factor * (i + 1));
        let logits = h.times_t(&p.mat(&layer.router.weights));
        let mut out = Mat::zeros(h.rows, h.cols);
        let mut alphas = Vec::with_capacity(h.rows);
        for r in 0..h.rows {
            alphas.push(softmax64(logits.row(r), None));
        }
        for r in 0..h.rows {
            for c in 0..h.cols {
                out.v[r * h.cols + c] = alphas[r][0] * bb.at(r, c);
            }
        }
        for (j, e) in layer.experts.iter().enumerate() {
            let down = h.times_t(&p.mat(&e.w_down)).map(gelu64);
            let z = down.times_t(&p.mat(&e.w_up)).add(&h);
            for r in 0..h.rows {
                for c in 0..h.cols {
                    out.v[r * h.cols + c] += alphas[r][j + 1] * z.at(r, c);
                }
            }
        }
        h = out;
    }
    h
}

pub fn embed_items(model: &XsmoeModel, visual: Option<&FeatureStack>, textual: Option<&FeatureStack>, p: &Params) -> Mat {
    let mut parts = Vec::new();
    for m in model.variant.modalities() {
        let stack = match m {
            Modality::Visual => visual,
            Modality::Textual => textual,
        }
        .expect("features for every modality");
        parts.push(match model.side(m) {
            Some(net) => side_forward(net, stack, p),
            None => stack_layer(stack, stack.layers.len() - 1),
        });
    }
    let rows = parts[0].rows;
    let cols: usize = parts.iter().map(|m| m.cols).sum();
    let mut x = Mat::zeros(rows, cols);
    for r in 0..rows {
        let mut off = 0;
        for part in &parts {
            x.v[r * cols + off..r * cols + off + part.cols].copy_from_slice(part.row(r));
            off += part.cols;
        }
    }
    x.times_t(&p.mat(&model.fusion.fc)).add_row_vec(&p.vec(&model.fusion.bias))
}

fn linear(x: &Mat, l: &Linear, p: &Params) -> Mat {
    x.times_t(&p.mat(&l.weight)).add_row_vec(&p.vec(&l.bias))
}

fn layer_norm(x: &Mat, ln: &LayerNorm, p: &Params) -> Mat {
    let (g, b) = (p.vec(&ln.gamma), p.vec(&ln.beta));
    let mut out = Mat::zeros(x.rows, x.cols);
    let eps = 1e-5f32 as f64;
    for r in 0..x.rows {
        let row = x.row(r);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let s = 1.0 / (var + eps).sqrt();
        for c in 0..x.cols {
            out.v[r * x.cols + c] = (row[c] - mean) * s * g[c] + b[c];
        }
    }
    out
}

fn block(enc: &SeqEncoder, blk: &Block, x: &Mat, starts: &[usize], only_last: bool, p: &Params) -> Mat {
    let l = enc.config.max_len;
    let d = enc.config.dim;
    let heads = enc.config.heads;
    let dh = d / heads;
    let b = starts.len();
    let q_rows: Vec<usize> = if only_last {
        (0..b).map(|s| s * l + l - 1).collect()
    } else {
        (0..b * l).collect()
    };
    let mut q_in = Mat::zeros(q_rows.len(), d);
    for (i, &r) in q_rows.iter().enumerate() {
        q_in.v[i * d..(i + 1) * d].copy_from_slice(x.row(r));
    }
    let q = linear(&q_in, &blk.query, p);
    let k = linear(x, &blk.key, p);
    let v = linear(x, &blk.value, p);
    let scale = 1.0 / (dh as f32).sqrt() as f64;
    let mut cat = Mat::zeros(q_rows.len(), d);
    for (i, &r) in q_rows.iter().enumerate() {
        let seq = r / l;
        let pos = r % l;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let scores: Vec<f64> = (0..l)
                .map(|kp| {
                    let kr = seq * l + kp;
                    q.row(i)[cols.clone()].iter().zip(&k.row(kr)[cols.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale
                })
                .collect();
            let mask: Vec<bool> = (0..l).map(|kp| kp <= pos && kp >= starts[seq]).collect();
            let a = softmax64(&scores, Some(&mask));
            for c in cols.clone() {
                cat.v[i * d + c] = (0..l).map(|kp| a[kp] * v.at(seq * l + kp, c)).sum();
            }
        }
    }
    let attn = linear(&cat, &blk.out, p);
    let x = layer_norm(&q_in.add(&attn), &blk.norm_attn, p);
    let f = linear(&linear(&x, &blk.ffn_in, p).map(gelu64), &blk.ffn_out, p);
    layer_norm(&x.add(&f), &blk.norm_ffn, p)
}

/// User vectors for left-padded prefixes into `items`.
pub fn encode(enc: &SeqEncoder, items: &Mat, prefixes: &[Vec<usize>], p: &Params) -> Mat {
    let l = enc.config.max_len;
    let d = enc.config.dim;
    let pos = p.mat(&enc.positions);
    let mut x = Mat::zeros(prefixes.len() * l, d);
    let mut starts = Vec::new();
    for (s, pre) in prefixes.iter().enumerate() {
        let pad = l - pre.len();
        starts.push(pad);
        for k in 0..l {
            for c in 0..d {
                let item = if k >= pad { items.at(pre[k - pad], c) } else { 0.0 };
                x.v[(s * l + k) * d + c] = item + pos.at(k, c);
            }
        }
    }
    let mut x = layer_norm(&x, &enc.norm_in, p);
    let n = enc.blocks.len();
    if n == 0 {
        let mut out = Mat::zeros(prefixes.len(), d);
        for s in 0..prefixes.len() {
            out.v[s * d..(s + 1) * d].copy_from_slice(x.row(s * l + l - 1));
        }
        return out;
    }
    for (i, blk) in enc.blocks.iter().enumerate() {
        x = block(enc, blk, &x, &starts, i + 1 == n, p);
    }
    x
}

/// Mean over rows of the popularity-shifted masked cross-entropy.
/// `users` is `[B, d]`, `targets` `[C, d]`, `mask` `[B × C]`.
pub fn debiased_loss(users: &Mat, targets: &Mat, log_pop: &[f64], mask: &[bool], target_cols: &[usize]) -> f64 {
    let c = targets.rows;
    let mut total = 0.0;
    for r in 0..users.rows {
        let logits: Vec<f64> = (0..c)
            .map(|j| users.row(r).iter().zip(targets.row(j)).map(|(a, b)| a * b).sum::<f64>() - log_pop[j])
            .collect();
        let m = &mask[r * c..(r + 1) * c];
        let max = (0..c).filter(|&j| m[j]).map(|j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).filter(|&j| m[j]).map(|j| (logits[j] - max).exp()).sum();
        total += max + z.ln() - logits[target_cols[r]];
    }
    total / users.rows as f64
}
