use std::collections::HashMap;

use crate::data::{sort_chronologically, FeatureCache, Interaction};
use crate::error::{Error, Result};
use crate::model::{FeatureStack, ItemFeatures, Modality};

/// Sorts chronologically and splits into `parts` contiguous chunks whose
/// sizes differ by at most one (earlier chunks take the remainder).
pub fn chunk_stream(mut interactions: Vec<Interaction>, parts: usize) -> Result<Vec<Vec<Interaction>>> {
    if parts == 0 || interactions.len() < parts {
        return Err(Error::Config(format!(
            "{} interactions cannot fill {parts} chunks",
            interactions.len()
        )));
    }
    sort_chronologically(&mut interactions);
    let (base, extra) = (interactions.len() / parts, interactions.len() % parts);
    let mut rest = interactions.into_iter();
    Ok((0..parts)
        .map(|c| rest.by_ref().take(base + usize::from(c < extra)).collect())
        .collect())
}

/// Number of leading interactions that go to training; the rest validate.
pub fn train_len(chunk_len: usize, fraction: f64) -> usize {
    // The epsilon keeps exact products like 100 · 0.85 from flooring to 84.
    ((chunk_len as f64 * fraction + 1e-9).floor() as usize).min(chunk_len)
}

/// Per-modality feature rows indexed by dense item.
#[derive(Clone, Debug)]
struct ModalFeatures {
    depth: usize,
    dim: usize,
    /// `items × depth × dim`
    data: Vec<f32>,
}

/// One interaction with dense user and item indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub user: usize,
    pub item: usize,
    /// Global position of this user's previous event.
    pub prev: Option<usize>,
}

/// Chunked stream with dense indices and item features.
///
/// Dense item indices follow first appearance in the sorted stream, so the
/// catalog after chunk `s` is exactly `0..catalog_len(s)`.
#[derive(Clone, Debug)]
pub struct StreamDataset {
    pub item_ids: Vec<u64>,
    pub user_ids: Vec<u64>,
    events: Vec<Event>,
    chunk_bounds: Vec<usize>,
    catalog_len: Vec<usize>,
    visual: Option<ModalFeatures>,
    textual: Option<ModalFeatures>,
}

impl StreamDataset {
    /// Every item in `interactions` must appear in each provided cache;
    /// missing ids are all reported together.
    pub fn new(
        interactions: Vec<Interaction>,
        chunks: usize,
        visual: Option<&FeatureCache>,
        textual: Option<&FeatureCache>,
    ) -> Result<Self> {
        let chunked = chunk_stream(interactions, chunks)?;
        let mut item_index: HashMap<u64, usize> = HashMap::new();
        let mut user_index: HashMap<u64, usize> = HashMap::new();
        let (mut item_ids, mut user_ids) = (Vec::new(), Vec::new());
        let mut last_seen: Vec<Option<usize>> = Vec::new();
        let mut events = Vec::new();
        let mut chunk_bounds = vec![0];
        let mut catalog_len = Vec::with_capacity(chunks);
        for chunk in &chunked {
            for x in chunk {
                let item = *item_index.entry(x.item_id).or_insert_with(|| {
                    item_ids.push(x.item_id);
                    item_ids.len() - 1
                });
                let user = *user_index.entry(x.user_id).or_insert_with(|| {
                    user_ids.push(x.user_id);
                    last_seen.push(None);
                    user_ids.len() - 1
                });
                events.push(Event {
                    user,
                    item,
                    prev: last_seen[user],
                });
                last_seen[user] = Some(events.len() - 1);
            }
            chunk_bounds.push(events.len());
            catalog_len.push(item_ids.len());
        }

        let mut missing = Vec::new();
        let mut gather = |cache: Option<&FeatureCache>, m: Modality| -> Option<ModalFeatures> {
            let cache = cache?;
            if cache.modality != m {
                missing.push(format!("{m} cache is tagged {}", cache.modality));
                return None;
            }
            let rows: HashMap<u64, usize> = cache.item_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
            let mut data = Vec::with_capacity(item_ids.len() * cache.stride());
            let mut absent = Vec::new();
            for &id in &item_ids {
                match rows.get(&id) {
                    Some(&r) => data.extend_from_slice(cache.item(r)),
                    None => absent.push(id),
                }
            }
            if !absent.is_empty() {
                absent.sort_unstable();
                let ids: Vec<String> = absent.iter().map(u64::to_string).collect();
                missing.push(format!("{m} cache lacks {} items: {}", ids.len(), ids.join(",")));
                return None;
            }
            Some(ModalFeatures {
                depth: cache.depth,
                dim: cache.dim,
                data,
            })
        };
        let visual = gather(visual, Modality::Visual);
        let textual = gather(textual, Modality::Textual);
        if !missing.is_empty() {
            return Err(Error::Data(missing.join("; ")));
        }
        Ok(StreamDataset {
            item_ids,
            user_ids,
            events,
            chunk_bounds,
            catalog_len,
            visual,
            textual,
        })
    }

    pub fn num_chunks(&self) -> usize {
        self.catalog_len.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn event(&self, pos: usize) -> Event {
        self.events[pos]
    }

    /// Global positions of chunk `s`.
    pub fn chunk(&self, s: usize) -> std::ops::Range<usize> {
        self.chunk_bounds[s]..self.chunk_bounds[s + 1]
    }

    /// Items seen in chunks `0..=s`.
    pub fn catalog_len(&self, s: usize) -> usize {
        self.catalog_len[s]
    }

    pub fn has(&self, m: Modality) -> bool {
        self.modal(m).is_some()
    }

    pub fn feature_depth(&self, m: Modality) -> Option<usize> {
        self.modal(m).map(|f| f.depth)
    }

    fn modal(&self, m: Modality) -> Option<&ModalFeatures> {
        match m {
            Modality::Visual => self.visual.as_ref(),
            Modality::Textual => self.textual.as_ref(),
        }
    }

    /// The user's last `max_len` items strictly before `pos`, oldest first.
    pub fn prefix(&self, pos: usize, max_len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(max_len);
        let mut cur = self.events[pos].prev;
        while let Some(p) = cur {
            if out.len() == max_len {
                break;
            }
            out.push(self.events[p].item);
            cur = self.events[p].prev;
        }
        out.reverse();
        out
    }

    fn stack(&self, m: Modality, items: &[usize]) -> Option<FeatureStack> {
        let f = self.modal(m)?;
        let stride = f.depth * f.dim;
        let layers = (0..f.depth)
            .map(|k| {
                let mut layer = Vec::with_capacity(items.len() * f.dim);
                for &i in items {
                    let base = i * stride + k * f.dim;
                    layer.extend_from_slice(&f.data[base..base + f.dim]);
                }
                layer
            })
            .collect();
        Some(FeatureStack {
            layers,
            rows: items.len(),
            dim: f.dim,
        })
    }

    /// Feature stacks for `items` in the given order.
    pub fn features(&self, items: &[usize]) -> ItemStacks {
        ItemStacks {
            visual: self.stack(Modality::Visual, items),
            textual: self.stack(Modality::Textual, items),
        }
    }
}

/// Owned stacks backing an [`ItemFeatures`] view.
#[derive(Clone, Debug)]
pub struct ItemStacks {
    pub visual: Option<FeatureStack>,
    pub textual: Option<FeatureStack>,
}

impl ItemStacks {
    pub fn view(&self) -> ItemFeatures<'_> {
        ItemFeatures {
            visual: self.visual.as_ref(),
            textual: self.textual.as_ref(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize) -> Vec<Interaction> {
        (0..n).map(|i| Interaction::new((i % 3) as u64, (i % 5) as u64 + 10, i as i64)).collect()
    }

    #[test]
    fn chunk_sizes() {
        let c = chunk_stream(rows(10), 10).unwrap();
        assert!(c.iter().all(|x| x.len() == 1));
        assert_eq!(c[3][0].timestamp, 3);
        let c = chunk_stream(rows(11), 10).unwrap();
        let sizes: Vec<usize> = c.iter().map(Vec::len).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 11);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert!(matches!(chunk_stream(rows(3), 4), Err(Error::Config(_))));
    }

    #[test]
    fn shuffled_input_chunks_identically() {
        let mut shuffled = rows(37);
        shuffled.reverse();
        shuffled.swap(3, 20);
        assert_eq!(chunk_stream(shuffled, 6).unwrap(), chunk_stream(rows(37), 6).unwrap());
    }

    #[test]
    fn split_rule() {
        assert_eq!(train_len(100, 0.85), 85);
        assert_eq!(train_len(7, 0.85), 5);
        assert_eq!(train_len(1, 0.85), 0);
    }

    fn cache(m: Modality, ids: &[u64]) -> FeatureCache {
        let data = ids.iter().flat_map(|&id| vec![id as f32; 2 * 3]).collect();
        FeatureCache::new(m, 2, 3, ids.to_vec(), data).unwrap()
    }

    #[test]
    fn dense_indices_prefixes_and_features() {
        let xs = vec![
            Interaction::new(7, 100, 1),
            Interaction::new(8, 200, 2),
            Interaction::new(7, 300, 3),
            Interaction::new(7, 100, 4),
        ];
        let v = cache(Modality::Visual, &[300, 200, 100]);
        let ds = StreamDataset::new(xs, 2, Some(&v), None).unwrap();
        assert_eq!(ds.item_ids, vec![100, 200, 300]);
        assert_eq!(ds.catalog_len(0), 2);
        assert_eq!(ds.catalog_len(1), 3);
        assert_eq!(ds.prefix(3, 10), vec![0, 2]);
        assert_eq!(ds.prefix(3, 1), vec![2]);
        assert!(ds.prefix(0, 10).is_empty());
        let f = ds.features(&[2, 0]);
        assert_eq!(f.visual.unwrap().layers[1], vec![300.0, 300.0, 300.0, 100.0, 100.0, 100.0]);
        assert!(f.textual.is_none());
    }

    #[test]
    fn missing_features_listed_exhaustively() {
        let xs = vec![Interaction::new(1, 5, 1), Interaction::new(1, 6, 2), Interaction::new(1, 7, 3)];
        let v = cache(Modality::Visual, &[5]);
        let t = cache(Modality::Textual, &[5, 6]);
        let err = StreamDataset::new(xs, 3, Some(&v), Some(&t)).unwrap_err().to_string();
        assert!(err.contains("6,7") && err.contains("textual cache lacks 1 items: 7"), "{err}");
    }
}
