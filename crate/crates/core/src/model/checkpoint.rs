//! XSMO checkpoint: model structure, every parameter, and an optional RNG state.
//!
//! Little-endian. Header: magic `"XSMO"`, u32 version, u32 d, d′, d_e, M, g,
//! max_len, heads, blocks, ffn_dim, f32 dropout, u8 variant, u8 side mask
//! (bit 0 visual, bit 1 textual), u32 fusion input width, then u32 expert
//! count per layer per present side network. Body: per expert (u8 frozen,
//! u32 birth window, down and up matrices), router matrix and utilization
//! accumulators per layer, fusion head, encoder tensors, then the RNG block.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ExpertNet, ModelDims, Router, SideLayer, XsmoeModel};
use crate::config::Variant;
use crate::error::{CacheError, Error, Result};
use crate::numerics::Tensor;
use crate::seqrec::EncoderConfig;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"XSMO";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.0.extend_from_slice(&t.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CacheError::Truncated {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| CacheError::Header("tensor size overflows".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect())
    }
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        Tensor::from_vec(&[rows, cols], self.floats(rows * cols)?)
    }
}

/// Serializes the model and, if given, the RNG that continues training.
pub fn to_bytes(model: &XsmoeModel, rng: Option<&ChaCha8Rng>) -> Vec<u8> {
    let d = &model.dims;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION as usize);
    for v in [
        d.dim,
        d.hidden,
        d.embed,
        d.side_layers,
        d.group_factor,
        d.encoder.max_len,
        d.encoder.heads,
        d.encoder.blocks,
        d.encoder.ffn_dim,
    ] {
        w.u32(v);
    }
    w.0.extend_from_slice(&d.encoder.dropout.to_le_bytes());
    w.u8(model.variant.tag());
    w.u8(model.visual.is_some() as u8 | (model.textual.is_some() as u8) << 1);
    w.u32(model.fusion.input_dim());
    for net in model.side_networks() {
        w.u32(net.layers.len());
        for layer in &net.layers {
            w.u32(layer.num_experts());
        }
    }
    for net in model.side_networks() {
        for layer in &net.layers {
            for e in &layer.experts {
                w.u8(e.frozen as u8);
                w.u32(e.birth_window);
                w.tensor(&e.w_down);
                w.tensor(&e.w_up);
            }
            w.tensor(&layer.router.weights);
            layer.util_num.iter().for_each(|&v| w.f64(v));
            w.f64(layer.util_backbone);
            w.u64(layer.util_count);
        }
    }
    for t in model.fusion.params().into_iter().chain(model.encoder.params()) {
        w.tensor(t);
    }
    match rng {
        Some(r) => {
            w.u8(1);
            w.0.extend_from_slice(&r.get_seed());
            w.u64(r.get_stream());
            w.0.extend_from_slice(&r.get_word_pos().to_le_bytes());
        }
        None => w.u8(0),
    }
    w.0
}

pub fn from_bytes(bytes: &[u8]) -> Result<(XsmoeModel, Option<ChaCha8Rng>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.array::<4>()?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CacheError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        }
        .into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(CacheError::Version(version.min(255) as u8).into());
    }
    let mut h = [0usize; 9];
    for v in &mut h {
        *v = r.u32()?;
    }
    let dropout = f32::from_le_bytes(r.array()?);
    let [dim, hidden, embed, side_layers, group_factor, max_len, heads, blocks, ffn_dim] = h;
    let dims = ModelDims {
        dim,
        hidden,
        embed,
        side_layers,
        group_factor,
        encoder: EncoderConfig {
            dim: embed,
            max_len,
            heads,
            blocks,
            ffn_dim,
            dropout,
        },
    };
    let tag = r.u8()?;
    let variant = Variant::from_tag(tag).ok_or_else(|| CacheError::Header(format!("unknown variant tag {tag}")))?;
    let mask = r.u8()?;
    let mut model = XsmoeModel::new(dims, variant, 0)?;
    let present = (model.visual.is_some() as u8) | (model.textual.is_some() as u8) << 1;
    if mask != present {
        return Err(CacheError::Header(format!("side-network mask {mask:#b} does not fit variant {variant}")).into());
    }
    if r.u32()? != model.fusion.input_dim() {
        return Err(CacheError::Header("fusion input width does not fit variant".into()).into());
    }
    let mut counts = Vec::new();
    for _ in 0..mask.count_ones() {
        let layers = r.u32()?;
        if layers != side_layers {
            return Err(CacheError::Header(format!("{layers} side layers, header says {side_layers}")).into());
        }
        counts.push((0..layers).map(|_| r.u32()).collect::<Result<Vec<_>>>()?);
    }
    for (net, counts) in model.side_networks_mut().zip(&counts) {
        for (i, (layer, &n)) in net.layers.iter_mut().zip(counts).enumerate() {
            let experts = (0..n)
                .map(|_| {
                    let frozen = r.u8()? != 0;
                    let birth = r.u32()?;
                    let down = r.matrix(hidden, dim)?;
                    let up = r.matrix(dim, hidden)?;
                    ExpertNet::from_weights(down.trainable(), up.trainable(), frozen, birth)
                })
                .collect::<Result<Vec<_>>>()?;
            let router = Router {
                weights: r.matrix(n + 1, dim)?.trainable(),
                layer_index: i,
            };
            let mut rebuilt = SideLayer::from_parts(experts, router)?;
            for v in &mut rebuilt.util_num {
                *v = r.f64()?;
            }
            rebuilt.util_backbone = r.f64()?;
            rebuilt.util_count = r.u64()?;
            *layer = rebuilt;
        }
    }
    let mut rest: Vec<&mut Tensor> = model.fusion.params_mut().into_iter().collect();
    rest.extend(model.encoder.params_mut());
    for t in rest {
        let vals = r.floats(t.len())?;
        t.data_mut().copy_from_slice(&vals);
    }
    let rng = match r.u8()? {
        0 => None,
        1 => {
            let seed = r.array::<32>()?;
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.array()?);
            let mut rng = ChaCha8Rng::from_seed(seed);
            rng.set_stream(stream);
            rng.set_word_pos(word_pos);
            Some(rng)
        }
        b => return Err(CacheError::Header(format!("bad rng flag {b}")).into()),
    };
    if r.pos != bytes.len() {
        return Err(CacheError::Trailing(bytes.len() - r.pos).into());
    }
    if !model.all_finite() {
        return Err(Error::Numerical("checkpoint holds non-finite parameters".into()));
    }
    Ok((model, rng))
}

pub fn save(path: &Path, model: &XsmoeModel, rng: Option<&ChaCha8Rng>) -> Result<()> {
    std::fs::write(path, to_bytes(model, rng))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(XsmoeModel, Option<ChaCha8Rng>)> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::config::RunConfig;

    fn grown(variant: Variant) -> XsmoeModel {
        let mut m = XsmoeModel::new(RunConfig::default().model_dims(), variant, 3).unwrap();
        m.expand(1).unwrap();
        m.expand(2).unwrap();
        if let Some(v) = m.visual.as_mut() {
            v.layers[0].util_num[1] = 2.5;
            v.layers[0].util_count = 7;
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for variant in [Variant::Xsmoe, Variant::NoFt, Variant::Textual] {
            let m = grown(variant);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let _: u64 = rng.random();
            let bytes = to_bytes(&m, Some(&rng));
            let (back, back_rng) = from_bytes(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.param_digest(), m.param_digest());
            let mut back_rng = back_rng.unwrap();
            assert_eq!(back_rng.random::<u64>(), rng.random::<u64>());
            assert_eq!(to_bytes(&back, Some(&back_rng)), to_bytes(&m, Some(&rng)));
        }
    }

    #[test]
    fn header_and_truncation_errors() {
        let bytes = to_bytes(&grown(Variant::Xsmoe), None);
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Cache(CacheError::Truncated { .. }))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(matches!(from_bytes(&bad), Err(Error::Cache(CacheError::BadMagic { .. }))));
        let mut long = bytes;
        long.push(1);
        assert!(from_bytes(&long).is_err());
    }
}
