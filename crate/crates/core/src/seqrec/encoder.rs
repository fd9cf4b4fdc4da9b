//! Causal Transformer over item-embedding prefixes.
//!
//! Prefixes are left-padded to `max_len`; pad positions are masked out as
//! attention keys, so the last position only ever sees real items. The
//! user embedding is the output at the last position.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

const LN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub max_len: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_dim: usize,
    pub dropout: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::randn(&[output, input], 1.0 / (input as f32).sqrt(), rng).trainable(),
            bias: Tensor::zeros(&[output]).trainable(),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul(x, w, true)?;
        g.add_bias(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::filled(&[dim], 1.0).trainable(),
            beta: Tensor::zeros(&[dim]).trainable(),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gm = g.param(&self.gamma);
        let bt = g.param(&self.beta);
        g.layer_norm(x, gm, bt, LN_EPS)
    }
}

/// Post-norm Transformer block: attention and FFN sublayers, each with a
/// residual connection followed by layer normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm_attn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm_ffn: LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqEncoder {
    pub config: EncoderConfig,
    /// `max_len × dim`
    pub positions: Tensor,
    pub norm_in: LayerNorm,
    pub blocks: Vec<Block>,
}

/// Left-padded layout of a batch of prefixes.
struct Layout {
    batch: usize,
    len: usize,
    /// First real position per sequence.
    start: Vec<usize>,
}

impl Layout {
    fn key_mask(&self, only_last: bool) -> Vec<bool> {
        let l = self.len;
        let queries = if only_last { 1 } else { l };
        let mut mask = Vec::with_capacity(self.batch * queries * l);
        for &s in &self.start {
            for q in (l - queries)..l {
                mask.extend((0..l).map(|k| k <= q && k >= s));
            }
        }
        mask
    }
}

impl SeqEncoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        if config.heads == 0 || !config.dim.is_multiple_of(config.heads) {
            return Err(Error::Config(format!(
                "encoder width {} is not divisible by {} heads",
                config.dim, config.heads
            )));
        }
        let d = config.dim;
        let blocks = (0..config.blocks)
            .map(|_| Block {
                query: Linear::new(d, d, rng),
                key: Linear::new(d, d, rng),
                value: Linear::new(d, d, rng),
                out: Linear::new(d, d, rng),
                norm_attn: LayerNorm::new(d),
                ffn_in: Linear::new(d, config.ffn_dim, rng),
                ffn_out: Linear::new(config.ffn_dim, d, rng),
                norm_ffn: LayerNorm::new(d),
            })
            .collect();
        Ok(SeqEncoder {
            config,
            positions: Tensor::randn(&[config.max_len, d], 0.02, rng).trainable(),
            norm_in: LayerNorm::new(d),
            blocks,
        })
    }

    fn embed<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        items: Var,
        prefixes: &[Vec<usize>],
        rng: &mut R,
    ) -> Result<(Var, Layout)> {
        let l = self.config.max_len;
        let d = self.config.dim;
        if g.shape(items).len() != 2 || g.shape(items)[1] != d {
            return Err(Error::shape("encode_sequence", &[g.shape(items), &[d]]));
        }
        let mut index = Vec::with_capacity(prefixes.len() * l);
        let mut start = Vec::with_capacity(prefixes.len());
        for p in prefixes {
            if p.is_empty() {
                return Err(Error::Contract("cannot encode an empty prefix".into()));
            }
            if p.len() > l {
                return Err(Error::Contract(format!("prefix of length {} exceeds max length {l}", p.len())));
            }
            let pad = l - p.len();
            start.push(pad);
            index.extend(std::iter::repeat_n(None, pad));
            index.extend(p.iter().map(|&i| Some(i)));
        }
        let x = g.gather(items, &index)?;
        let pos = g.param(&self.positions);
        let pos_index: Vec<Option<usize>> = (0..index.len()).map(|k| Some(k % l)).collect();
        let p = g.gather(pos, &pos_index)?;
        let x = g.add(x, p)?;
        let x = self.norm_in.forward(g, x)?;
        let x = g.dropout(x, self.config.dropout, rng)?;
        Ok((
            x,
            Layout {
                batch: prefixes.len(),
                len: l,
                start,
            },
        ))
    }

    /// Attention sublayer. With `only_last`, queries come from the final
    /// position of each sequence and the result has one row per sequence.
    fn attention(&self, g: &mut Graph, blk: &Block, x: Var, layout: &Layout, only_last: bool, mask: &[bool]) -> Result<Var> {
        let (b, l, d) = (layout.batch, layout.len, self.config.dim);
        let heads = self.config.heads;
        let dh = d / heads;
        let q_in = if only_last { last_rows(g, x, b, l)? } else { x };
        let ql = if only_last { 1 } else { l };
        let q = blk.query.forward(g, q_in)?;
        let k = blk.key.forward(g, x)?;
        let v = blk.value.forward(g, x)?;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut head_out = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let qh = g.reshape(qh, &[b, ql, dh])?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let kh = g.reshape(kh, &[b, l, dh])?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let vh = g.reshape(vh, &[b, l, dh])?;
            let s = g.batch_matmul(qh, kh, true)?;
            let s = g.scale(s, scale);
            let a = g.masked_softmax(s, mask)?;
            let o = g.batch_matmul(a, vh, false)?;
            head_out.push(g.reshape(o, &[b * ql, dh])?);
        }
        let cat = if heads == 1 { head_out[0] } else { g.concat_cols(&head_out)? };
        blk.out.forward(g, cat)
    }

    #[allow(clippy::too_many_arguments)]
    fn block<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        blk: &Block,
        x: Var,
        layout: &Layout,
        only_last: bool,
        mask: &[bool],
        rng: &mut R,
    ) -> Result<Var> {
        let attn = self.attention(g, blk, x, layout, only_last, mask)?;
        let attn = g.dropout(attn, self.config.dropout, rng)?;
        let resid = if only_last { last_rows(g, x, layout.batch, layout.len)? } else { x };
        let x = g.add(resid, attn)?;
        let x = blk.norm_attn.forward(g, x)?;
        let f = blk.ffn_in.forward(g, x)?;
        let f = g.gelu(f);
        let f = blk.ffn_out.forward(g, f)?;
        let f = g.dropout(f, self.config.dropout, rng)?;
        let x = g.add(x, f)?;
        blk.norm_ffn.forward(g, x)
    }

    /// User embeddings `[B, dim]` for prefixes of indices into `items`
    /// (an `[n, dim]` item-embedding table on the graph).
    pub fn encode<R: Rng + ?Sized>(&self, g: &mut Graph, items: Var, prefixes: &[Vec<usize>], rng: &mut R) -> Result<Var> {
        let (mut x, layout) = self.embed(g, items, prefixes, rng)?;
        if self.blocks.is_empty() {
            return last_rows(g, x, layout.batch, layout.len);
        }
        let full_mask = layout.key_mask(false);
        let last_mask = layout.key_mask(true);
        let n = self.blocks.len();
        for (i, blk) in self.blocks.iter().enumerate() {
            let only_last = i + 1 == n;
            let mask = if only_last { &last_mask } else { &full_mask };
            x = self.block(g, blk, x, &layout, only_last, mask, rng)?;
        }
        Ok(x)
    }

    /// Outputs at every position, `[B·max_len, dim]`.
    pub fn encode_all<R: Rng + ?Sized>(&self, g: &mut Graph, items: Var, prefixes: &[Vec<usize>], rng: &mut R) -> Result<Var> {
        let (mut x, layout) = self.embed(g, items, prefixes, rng)?;
        let mask = layout.key_mask(false);
        for blk in &self.blocks {
            x = self.block(g, blk, x, &layout, false, &mask, rng)?;
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.positions, &self.norm_in.gamma, &self.norm_in.beta];
        for b in &self.blocks {
            for lin in [&b.query, &b.key, &b.value, &b.out] {
                v.extend([&lin.weight, &lin.bias]);
            }
            v.extend([&b.norm_attn.gamma, &b.norm_attn.beta]);
            for lin in [&b.ffn_in, &b.ffn_out] {
                v.extend([&lin.weight, &lin.bias]);
            }
            v.extend([&b.norm_ffn.gamma, &b.norm_ffn.beta]);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.positions, &mut self.norm_in.gamma, &mut self.norm_in.beta];
        for b in &mut self.blocks {
            for lin in [&mut b.query, &mut b.key, &mut b.value, &mut b.out] {
                v.extend([&mut lin.weight, &mut lin.bias]);
            }
            v.extend([&mut b.norm_attn.gamma, &mut b.norm_attn.beta]);
            for lin in [&mut b.ffn_in, &mut b.ffn_out] {
                v.extend([&mut lin.weight, &mut lin.bias]);
            }
            v.extend([&mut b.norm_ffn.gamma, &mut b.norm_ffn.beta]);
        }
        v
    }
}

fn last_rows(g: &mut Graph, x: Var, batch: usize, len: usize) -> Result<Var> {
    let idx: Vec<Option<usize>> = (0..batch).map(|b| Some(b * len + len - 1)).collect();
    g.gather(x, &idx)
}
