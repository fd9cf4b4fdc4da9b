use crate::error::{Error, Result};

/// Add-one smoothed item popularity over one training chunk:
/// `p_i = (count_i + 1) / (total + catalog_size)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PopularityTable {
    probs: Vec<f64>,
}

impl PopularityTable {
    /// `items` are dense item indices of the chunk's interactions;
    /// `catalog_size` bounds the index space.
    pub fn build(items: &[usize], catalog_size: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Data("popularity over an empty chunk".into()));
        }
        let mut counts = vec![0u64; catalog_size];
        for &i in items {
            let slot = counts
                .get_mut(i)
                .ok_or_else(|| Error::Data(format!("item index {i} outside catalog of {catalog_size}")))?;
            *slot += 1;
        }
        let denom = (items.len() + catalog_size) as f64;
        Ok(PopularityTable {
            probs: counts.iter().map(|&c| (c as f64 + 1.0) / denom).collect(),
        })
    }

    pub fn prob(&self, item: usize) -> f64 {
        self.probs.get(item).copied().unwrap_or(0.0)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_item_single_interaction() {
        let t = PopularityTable::build(&[0], 1).unwrap();
        assert_eq!(t.prob(0), 1.0);
    }

    #[test]
    fn two_items_smoothed() {
        let t = PopularityTable::build(&[0, 0, 0, 1], 2).unwrap();
        assert_eq!(t.prob(0), 4.0 / 6.0);
        assert_eq!(t.prob(1), 2.0 / 6.0);
    }

    #[test]
    fn empty_chunk_and_out_of_range_rejected() {
        assert!(PopularityTable::build(&[], 3).is_err());
        assert!(PopularityTable::build(&[5], 3).is_err());
    }
}
