//! XSMF feature cache: cached backbone outputs per item.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic      4 bytes  "XSMF"
//! version    u8       1
//! modality   u8       0 = visual, 1 = textual
//! items      u32
//! depth      u32      number of layer vectors per item (M+1)
//! dim        u32
//! then per item: item_id u64, depth × dim f32 in layer order l₀…l_M
//! ```

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use crate::error::{CacheError, Error, Result};
use crate::model::Modality;

pub const CACHE_MAGIC: [u8; 4] = *b"XSMF";
pub const CACHE_VERSION: u8 = 1;
pub const CACHE_HEADER_LEN: usize = 4 + 1 + 1 + 4 + 4 + 4;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    pub modality: Modality,
    pub depth: usize,
    pub dim: usize,
    pub item_ids: Vec<u64>,
    /// `items × depth × dim`
    pub data: Vec<f32>,
}

impl FeatureCache {
    pub fn new(modality: Modality, depth: usize, dim: usize, item_ids: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        let cache = FeatureCache {
            modality,
            depth,
            dim,
            item_ids,
            data,
        };
        cache.validate()?;
        Ok(cache)
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn stride(&self) -> usize {
        self.depth * self.dim
    }

    /// All layer vectors of the `idx`-th item, concatenated.
    pub fn item(&self, idx: usize) -> &[f32] {
        let s = self.stride();
        &self.data[idx * s..(idx + 1) * s]
    }

    pub fn vector(&self, idx: usize, layer: usize) -> &[f32] {
        let base = idx * self.stride() + layer * self.dim;
        &self.data[base..base + self.dim]
    }

    pub fn byte_len(&self) -> usize {
        CACHE_HEADER_LEN + self.len() * (8 + 4 * self.stride())
    }

    pub fn validate(&self) -> Result<(), CacheError> {
        if self.data.len() != self.len() * self.stride() {
            return Err(CacheError::Header(format!(
                "{} items × {} layers × {} dims does not match {} values",
                self.len(),
                self.depth,
                self.dim,
                self.data.len()
            )));
        }
        let mut seen = HashSet::with_capacity(self.len());
        for (i, &id) in self.item_ids.iter().enumerate() {
            if !seen.insert(id) {
                return Err(CacheError::DuplicateItem(id));
            }
            for layer in 0..self.depth {
                if self.vector(i, layer).iter().any(|v| !v.is_finite()) {
                    return Err(CacheError::NonFinite { item_id: id, layer });
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&CACHE_MAGIC);
        out.push(CACHE_VERSION);
        out.push(self.modality.tag());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.depth as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (i, id) in self.item_ids.iter().enumerate() {
            out.extend_from_slice(&id.to_le_bytes());
            for v in self.item(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CacheError> {
        if bytes.len() < CACHE_HEADER_LEN {
            return Err(CacheError::Truncated {
                expected: CACHE_HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4-byte slice");
        if magic != CACHE_MAGIC {
            return Err(CacheError::BadMagic {
                expected: CACHE_MAGIC,
                found: magic,
            });
        }
        if bytes[4] != CACHE_VERSION {
            return Err(CacheError::Version(bytes[4]));
        }
        let modality = Modality::from_tag(bytes[5]).ok_or(CacheError::Modality(bytes[5]))?;
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4-byte slice")) as usize;
        let (items, depth, dim) = (u32_at(6), u32_at(10), u32_at(14));
        let stride = depth
            .checked_mul(dim)
            .ok_or_else(|| CacheError::Header("layer payload overflows".into()))?;
        let expected = items
            .checked_mul(8 + 4 * stride)
            .and_then(|p| p.checked_add(CACHE_HEADER_LEN))
            .ok_or_else(|| CacheError::Header("payload size overflows".into()))?;
        if bytes.len() < expected {
            return Err(CacheError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(CacheError::Trailing(bytes.len() - expected));
        }
        let mut item_ids = Vec::with_capacity(items);
        let mut data = Vec::with_capacity(items * stride);
        let mut off = CACHE_HEADER_LEN;
        for _ in 0..items {
            item_ids.push(u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8-byte slice")));
            off += 8;
            data.extend(
                bytes[off..off + 4 * stride]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk"))),
            );
            off += 4 * stride;
        }
        let cache = FeatureCache {
            modality,
            depth,
            dim,
            item_ids,
            data,
        };
        cache.validate()?;
        Ok(cache)
    }
}

pub fn write_cache(path: &Path, cache: &FeatureCache) -> Result<()> {
    cache.validate()?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&cache.to_bytes())?;
    f.sync_all()?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<FeatureCache> {
    let bytes = std::fs::read(path)?;
    FeatureCache::from_bytes(&bytes).map_err(Error::from)
}
