use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Subject-level k-fold assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub assignment: BTreeMap<u64, usize>,
}

impl FoldSplit {
    pub fn test_ids(&self, fold: usize) -> Vec<u64> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn train_ids(&self, fold: usize) -> Vec<u64> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(&id, _)| id)
            .collect()
    }
}

/// Stratified split: each class is shuffled and dealt round-robin, with the
/// dealing position carried over between classes so fold sizes stay within one.
pub fn split_folds(ids: &[u64], labels: &[u8], k: usize, seed: u64) -> Result<FoldSplit> {
    if ids.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} ids but {} labels",
            ids.len(),
            labels.len()
        )));
    }
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let mut by_class: BTreeMap<u8, Vec<u64>> = BTreeMap::new();
    for (&id, &l) in ids.iter().zip(labels) {
        by_class.entry(l).or_default().push(id);
    }
    let mut assignment = BTreeMap::new();
    let mut pos = 0usize;
    for (class, mut members) in by_class {
        if members.len() < k {
            return Err(Error::Data(format!(
                "class {class} has {} subjects, need at least {k}",
                members.len()
            )));
        }
        members.sort_unstable();
        members.shuffle(&mut rng::stream(seed, &[rng::label("folds"), class as u64]));
        for id in members {
            if assignment.insert(id, pos % k).is_some() {
                return Err(Error::Data(format!("duplicate subject id {id}")));
            }
            pos += 1;
        }
    }
    Ok(FoldSplit { k, assignment })
}
