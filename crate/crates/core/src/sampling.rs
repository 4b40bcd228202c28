//! Instance-balanced and class-balanced index samplers.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{bail, Result};
use crate::seed;

/// Sample ids grouped by class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    per_class: Vec<Vec<usize>>,
    total: usize,
}

impl DatasetIndex {
    /// Builds the index from each sample's class; sample `i` gets id `i`.
    pub fn from_labels(labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut per_class = vec![Vec::new(); num_classes];
        for (id, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                bail!(InvalidInput, "label {y} outside {num_classes} classes");
            }
            per_class[y].push(id);
        }
        Ok(DatasetIndex {
            per_class,
            total: labels.len(),
        })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.per_class.iter().map(Vec::len).collect()
    }

    pub fn ids_of(&self, class: usize) -> &[usize] {
        &self.per_class[class]
    }

    pub fn non_empty_classes(&self) -> Vec<usize> {
        (0..self.per_class.len())
            .filter(|&k| !self.per_class[k].is_empty())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    Instance,
    Class,
}

/// Uniform over samples. The first `N` draws of each block are a fresh
/// permutation, so `n = N` visits every id exactly once.
pub fn instance_balanced_indices(index: &DatasetIndex, seed: u64, n: usize) -> Result<Vec<usize>> {
    if index.total == 0 {
        bail!(InvalidInput, "cannot sample from an empty dataset");
    }
    let mut rng = seed::rng(&[seed, 0x1B]);
    let mut out = Vec::with_capacity(n);
    let mut perm: Vec<usize> = (0..index.total).collect();
    while out.len() < n {
        perm.shuffle(&mut rng);
        let take = (n - out.len()).min(perm.len());
        out.extend_from_slice(&perm[..take]);
    }
    Ok(out)
}

/// Uniform class among non-empty classes, then uniform sample within it,
/// with replacement.
pub fn class_balanced_indices(index: &DatasetIndex, seed: u64, n: usize) -> Result<Vec<usize>> {
    let classes = index.non_empty_classes();
    if classes.is_empty() {
        bail!(InvalidInput, "every class is empty");
    }
    let mut rng = seed::rng(&[seed, 0xCB]);
    Ok((0..n)
        .map(|_| {
            let ids = &index.per_class[classes[rng.random_range(0..classes.len())]];
            ids[rng.random_range(0..ids.len())]
        })
        .collect())
}

pub fn draw(kind: SamplerKind, index: &DatasetIndex, seed: u64, n: usize) -> Result<Vec<usize>> {
    match kind {
        SamplerKind::Instance => instance_balanced_indices(index, seed, n),
        SamplerKind::Class => class_balanced_indices(index, seed, n),
    }
}
