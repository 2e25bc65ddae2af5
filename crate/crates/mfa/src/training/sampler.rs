//! Identity-balanced PK batch sampling.
//!
//! Each batch draws `p` distinct identities and `k` images per identity, so
//! batch-hard triplet mining always finds positives and negatives. When an
//! identity owns fewer than `k` images, images repeat within the batch.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;

/// One sampled batch: indices into the item list, with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PkBatch {
    pub indices: Vec<usize>,
    pub labels: Vec<u32>,
}

impl PkBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Groups item indices by training label, the sampler's input.
pub fn group_by_label(labels: &[u32]) -> BTreeMap<u32, Vec<usize>> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (index, &label) in labels.iter().enumerate() {
        groups.entry(label).or_default().push(index);
    }
    groups
}

/// Draws a PK batch: `p` identities without replacement, `k` images each
/// (with replacement only if the identity has fewer than `k` images).
pub fn sample_pk_batch(
    groups: &BTreeMap<u32, Vec<usize>>,
    p: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PkBatch, TrainError> {
    if p < 2 || k < 2 {
        return Err(TrainError::InvalidConfig {
            reason: format!("PK batches need p >= 2 and k >= 2, got p = {p}, k = {k}"),
        });
    }
    if groups.len() < p {
        return Err(TrainError::TooFewIdentities {
            needed: p,
            got: groups.len(),
        });
    }
    let labels: Vec<u32> = groups.keys().copied().collect();
    let chosen = sample(rng, labels.len(), p);
    let mut batch = PkBatch {
        indices: Vec::with_capacity(p * k),
        labels: Vec::with_capacity(p * k),
    };
    for li in chosen.iter() {
        let label = labels[li];
        let pool = &groups[&label];
        if pool.len() >= k {
            for idx in sample(rng, pool.len(), k).iter() {
                batch.indices.push(pool[idx]);
                batch.labels.push(label);
            }
        } else {
            for _ in 0..k {
                batch.indices.push(pool[rng.random_range(0..pool.len())]);
                batch.labels.push(label);
            }
        }
    }
    Ok(batch)
}
