//! Explicit enumeration of transmission trees consistent with the data.

use crate::data::InfectiousSets;
use crate::error::{Error, Result};

use super::InfectorWeights;

pub const DEFAULT_TREE_LIMIT: u128 = 1_000_000;

/// Iterator over every assignment of one infector per infectee, with the
/// product of the chosen infector probabilities.
#[derive(Debug, Clone)]
pub struct TreeIter {
    infectees: Vec<u64>,
    choices: Vec<Vec<(u64, f64)>>,
    counter: Vec<usize>,
    done: bool,
}

/// Enumerates the trees of `sets` weighted by `weights`.
pub fn enumerate_trees(sets: &InfectiousSets, weights: &InfectorWeights, limit: u128) -> Result<TreeIter> {
    let count = sets.tree_count();
    if count > limit {
        return Err(Error::TreeLimit { count, limit });
    }
    let mut infectees = Vec::new();
    let mut choices = Vec::new();
    for (j, infectors) in sets.iter() {
        if infectors.is_empty() {
            continue;
        }
        infectees.push(j);
        choices.push(
            infectors
                .iter()
                .map(|&i| (i, weights.get(j, i).unwrap_or(0.0)))
                .collect::<Vec<_>>(),
        );
    }
    let counter = vec![0; infectees.len()];
    Ok(TreeIter {
        infectees,
        choices,
        counter,
        done: false,
    })
}

impl Iterator for TreeIter {
    /// `(infectee, infector)` pairs and the tree's probability.
    type Item = (Vec<(u64, u64)>, f64);

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut prob = 1.0;
        let tree = self
            .infectees
            .iter()
            .zip(&self.choices)
            .zip(&self.counter)
            .map(|((&j, opts), &c)| {
                prob *= opts[c].1;
                (j, opts[c].0)
            })
            .collect();
        // Advance the mixed-radix counter.
        self.done = true;
        for (c, opts) in self.counter.iter_mut().zip(&self.choices).rev() {
            *c += 1;
            if *c < opts.len() {
                self.done = false;
                break;
            }
            *c = 0;
        }
        Some((tree, prob))
    }
}
