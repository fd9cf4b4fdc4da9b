use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::StreamDataset;
use crate::error::{Error, Result};
use crate::model::XsmoeModel;
use crate::numerics::{kernels::dot, Graph};

pub const TOP_K: usize = 10;
const ITEM_BLOCK: usize = 1024;
const CASE_BLOCK: usize = 256;

/// NDCG@10 of a 1-based rank.
pub fn ndcg_of_rank(rank: usize) -> f64 {
    if rank <= TOP_K {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// 1-based rank of `target` among `scores`, ties broken by lower index
/// first; indices in `skip` are excluded from the ranking.
pub fn rank_of(scores: &[f32], target: usize, skip: Option<&HashSet<usize>>) -> usize {
    let t = scores[target];
    let mut ahead = 0;
    for (i, &s) in scores.iter().enumerate() {
        if i != target && (s > t || (s == t && i < target)) && skip.is_none_or(|k| !k.contains(&i)) {
            ahead += 1;
        }
    }
    ahead + 1
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalOutcome {
    pub hr_at_10: f64,
    pub ndcg_at_10: f64,
    /// Cases ranked, misses included.
    pub cases: usize,
    /// Targets outside the catalog, scored as misses.
    pub misses: usize,
}

/// Item embeddings for dense items `0..count`, row-major `[count, d_e]`.
pub fn embed_catalog(model: &XsmoeModel, data: &StreamDataset, count: usize) -> Result<Vec<f32>> {
    let mut table = Vec::with_capacity(count * model.dims.embed);
    let ids: Vec<usize> = (0..count).collect();
    for block in ids.chunks(ITEM_BLOCK) {
        let stacks = data.features(block);
        let mut g = Graph::new(false);
        let emb = model.embed_items(&mut g, &stacks.view())?;
        table.extend_from_slice(g.value(emb.emb));
    }
    Ok(table)
}

/// Per-case `(hit, ndcg)` for `positions`, ranking against items `0..catalog`.
fn score_cases(
    model: &XsmoeModel,
    data: &StreamDataset,
    table: &[f32],
    positions: &[usize],
    catalog: usize,
    seen: Option<&[HashSet<usize>]>,
) -> Result<Vec<(f64, f64)>> {
    let d = model.dims.embed;
    let max_len = model.dims.encoder.max_len;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(positions.len());
    let mut scores = vec![0.0f32; catalog];
    for block in positions.chunks(CASE_BLOCK) {
        let prefixes: Vec<Vec<usize>> = block.iter().map(|&p| data.prefix(p, max_len)).collect();
        let mut g = Graph::new(false);
        let items = g.constant(&[table.len() / d, d], table.to_vec())?;
        let users = model.encode_users(&mut g, items, &prefixes, &mut rng)?;
        let users = g.value(users);
        for (row, &p) in block.iter().enumerate() {
            let target = data.event(p).item;
            if target >= catalog {
                out.push((0.0, 0.0));
                continue;
            }
            let u = &users[row * d..(row + 1) * d];
            for (i, s) in scores.iter_mut().enumerate() {
                *s = dot(u, &table[i * d..(i + 1) * d]);
            }
            let skip = seen.map(|s| &s[data.event(p).user]);
            let rank = rank_of(&scores, target, skip);
            out.push((f64::from(u8::from(rank <= TOP_K)), ndcg_of_rank(rank)));
        }
    }
    Ok(out)
}

/// HR@10 and NDCG@10 of next-item prediction for the events at `positions`,
/// ranked against the first `catalog` dense items. Every position must have
/// a non-empty history. Cases are sharded over `threads` workers; results do
/// not depend on the thread count.
pub fn evaluate(
    model: &XsmoeModel,
    data: &StreamDataset,
    positions: &[usize],
    catalog: usize,
    seen: Option<&[HashSet<usize>]>,
    threads: usize,
) -> Result<EvalOutcome> {
    if positions.is_empty() {
        return Ok(EvalOutcome::default());
    }
    let max_len = model.dims.encoder.max_len;
    let widest = positions
        .iter()
        .flat_map(|&p| data.prefix(p, max_len))
        .max()
        .map_or(0, |m| m + 1)
        .max(catalog);
    let table = embed_catalog(model, data, widest)?;
    let threads = threads.clamp(1, positions.len().div_ceil(CASE_BLOCK));
    let per = positions.len().div_ceil(threads);
    let results: Vec<Result<Vec<(f64, f64)>>> = if threads == 1 {
        vec![score_cases(model, data, &table, positions, catalog, seen)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = positions
                .chunks(per)
                .map(|shard| s.spawn(|| score_cases(model, data, &table, shard, catalog, seen)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Invariant("evaluation worker panicked".into()))))
                .collect()
        })
    };
    let (mut hr, mut ndcg) = (0.0, 0.0);
    let mut cases = 0;
    for shard in results {
        for (h, n) in shard? {
            hr += h;
            ndcg += n;
            cases += 1;
        }
    }
    let misses = positions.iter().filter(|&&p| data.event(p).item >= catalog).count();
    Ok(EvalOutcome {
        hr_at_10: hr / cases as f64,
        ndcg_at_10: ndcg / cases as f64,
        cases,
        misses,
    })
}
