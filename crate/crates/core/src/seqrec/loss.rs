//! In-batch debiased cross-entropy.
//!
//! For row `u` with positive `i`, the candidates are `i` plus every other
//! row's target `j` that the user has not interacted with. Each logit is
//! shifted by `-log p` of its item before a masked softmax.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::{kernels::dot, Graph, Var};

use super::popularity::PopularityTable;

pub fn score(user: &[f32], item: &[f32]) -> f32 {
    dot(user, item)
}

/// Candidate layout for one batch: columns are the distinct target items in
/// first-appearance order.
#[derive(Clone, Debug, PartialEq)]
pub struct InBatchCandidates {
    pub columns: Vec<usize>,
    /// Column of each row's positive.
    pub target_cols: Vec<usize>,
    /// `[rows × columns]`, true where the column is a valid candidate.
    pub mask: Vec<bool>,
}

impl InBatchCandidates {
    /// `targets[r]` is row `r`'s positive item; `history(r, item)` reports
    /// whether user `r` has interacted with `item`.
    pub fn build(targets: &[usize], history: impl Fn(usize, usize) -> bool) -> Self {
        let mut columns: Vec<usize> = Vec::new();
        let mut target_cols = Vec::with_capacity(targets.len());
        for &t in targets {
            let c = match columns.iter().position(|&x| x == t) {
                Some(c) => c,
                None => {
                    columns.push(t);
                    columns.len() - 1
                }
            };
            target_cols.push(c);
        }
        let mut mask = Vec::with_capacity(targets.len() * columns.len());
        for (r, &tc) in target_cols.iter().enumerate() {
            mask.extend(columns.iter().enumerate().map(|(c, &item)| c == tc || !history(r, item)));
        }
        InBatchCandidates {
            columns,
            target_cols,
            mask,
        }
    }

    pub fn rows(&self) -> usize {
        self.target_cols.len()
    }

    /// Whether any row has at least one negative.
    pub fn has_negatives(&self) -> bool {
        let c = self.columns.len();
        self.mask.chunks(c.max(1)).any(|row| row.iter().filter(|&&m| m).count() > 1)
    }

    pub fn negatives_of(&self, row: usize) -> BTreeSet<usize> {
        let c = self.columns.len();
        (0..c)
            .filter(|&k| k != self.target_cols[row] && self.mask[row * c + k])
            .map(|k| self.columns[k])
            .collect()
    }
}

/// Mean over rows of the debiased softmax cross-entropy.
/// `users` is `[B, d_e]`, `targets` is `[C, d_e]` in `cands.columns` order.
pub fn batch_loss(g: &mut Graph, users: Var, targets: Var, cands: &InBatchCandidates, pop: &PopularityTable) -> Result<Var> {
    let scores = g.matmul(users, targets, true)?;
    let mut shift = Vec::with_capacity(cands.columns.len());
    for &item in &cands.columns {
        let p = pop.prob(item);
        if !(p > 0.0) {
            return Err(Error::Invariant(format!("popularity of item {item} is {p}")));
        }
        shift.push(-(p.ln() as f32));
    }
    let shift = g.constant(&[shift.len()], shift)?;
    let logits = g.add_bias(scores, shift)?;
    g.cross_entropy(logits, &cands.mask, &cands.target_cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_cases() {
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(score(&[0.0, 1.0], &[0.0, 1.0]), 1.0);
    }

    #[test]
    fn duplicate_targets_share_a_column() {
        let c = InBatchCandidates::build(&[4, 7, 4], |_, _| false);
        assert_eq!(c.columns, vec![4, 7]);
        assert_eq!(c.target_cols, vec![0, 1, 0]);
        assert_eq!(c.negatives_of(0), BTreeSet::from([7]));
    }

    #[test]
    fn history_excludes_negatives_but_never_the_positive() {
        // row 0 has seen item 7 and its own target 4
        let c = InBatchCandidates::build(&[4, 7], |r, i| r == 0 && (i == 7 || i == 4));
        assert!(c.negatives_of(0).is_empty());
        assert_eq!(c.negatives_of(1), BTreeSet::from([4]));
        assert!(c.mask[0]);
    }
}
