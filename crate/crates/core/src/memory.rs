//! Fixed-capacity, class-balanced rehearsal memory.
//!
//! Quotas are `capacity / classes_seen`, with the remainder handed to the
//! lowest class ids. Over-quota classes lose uniformly random samples; new
//! classes contribute a uniformly random subset.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;

use crate::error::{contract, Result};
use crate::rng::{self, Rng, Stream};
use crate::scenario::Batch;

#[derive(Debug, Clone)]
pub struct RehearsalMemory {
    capacity: usize,
    feature_dim: usize,
    entries: BTreeMap<usize, Vec<Vec<f64>>>,
    rng: Rng,
}

/// Per-class quotas for `classes` classes, lowest ids first.
pub fn class_quotas(capacity: usize, classes: usize) -> Vec<usize> {
    let base = capacity / classes;
    let rem = capacity % classes;
    (0..classes).map(|c| base + usize::from(c < rem)).collect()
}

impl RehearsalMemory {
    pub fn new(capacity: usize, feature_dim: usize, seed: u64) -> Self {
        Self {
            capacity,
            feature_dim,
            entries: BTreeMap::new(),
            rng: rng::stream(seed, Stream::Memory),
        }
    }

    pub(crate) fn from_entries(
        capacity: usize,
        feature_dim: usize,
        entries: BTreeMap<usize, Vec<Vec<f64>>>,
    ) -> Self {
        Self {
            capacity,
            feature_dim,
            entries,
            rng: rng::stream(0, Stream::Memory),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        self.entries.iter().map(|(&c, v)| (c, v.len())).collect()
    }

    pub fn entries(&self) -> &BTreeMap<usize, Vec<Vec<f64>>> {
        &self.entries
    }

    /// Every stored sample, ordered by class then insertion.
    pub fn all(&self) -> Batch {
        let mut b = Batch::default();
        for (&c, samples) in &self.entries {
            for s in samples {
                b.features.extend_from_slice(s);
                b.labels.push(c);
            }
        }
        b
    }

    /// Rebalances after a finished task. `task_data` holds the finished
    /// task's training samples with remapped labels.
    pub fn update_after_task(
        &mut self,
        task_data: &Batch,
        total_classes_seen: usize,
    ) -> Result<()> {
        if self.capacity < total_classes_seen {
            return Err(contract(format!(
                "memory of {} cannot hold one sample for each of {total_classes_seen} classes",
                self.capacity
            )));
        }
        if task_data.features.len() != task_data.labels.len() * self.feature_dim {
            return Err(contract(
                "task data does not match the memory's feature size",
            ));
        }
        if let Some(&bad) = task_data.labels.iter().find(|&&y| y >= total_classes_seen) {
            return Err(contract(format!(
                "label {bad} beyond {total_classes_seen} seen classes"
            )));
        }
        let quotas = class_quotas(self.capacity, total_classes_seen);

        for (&c, samples) in self.entries.iter_mut() {
            let q = quotas[c];
            if samples.len() > q {
                let keep = index::sample(&mut self.rng, samples.len(), q).into_vec();
                let mut keep_sorted = keep;
                keep_sorted.sort_unstable();
                *samples = keep_sorted
                    .into_iter()
                    .map(|i| std::mem::take(&mut samples[i]))
                    .collect();
            }
        }

        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in task_data.labels.iter().enumerate() {
            by_class.entry(y).or_default().push(i);
        }
        let d = self.feature_dim;
        for (c, idx) in by_class {
            let stored = self.entries.entry(c).or_default();
            let room = quotas[c].saturating_sub(stored.len());
            let take = room.min(idx.len());
            let mut chosen = index::sample(&mut self.rng, idx.len(), take).into_vec();
            chosen.sort_unstable();
            for k in chosen {
                let i = idx[k];
                stored.push(task_data.features[i * d..(i + 1) * d].to_vec());
            }
        }
        self.entries.retain(|_, v| !v.is_empty());
        Ok(())
    }

    /// Draws exactly `batch_size` samples with per-class counts differing by
    /// at most one. Classes receiving the extra draw are chosen at random.
    /// Sampling is without replacement within a class unless the class holds
    /// fewer samples than requested.
    pub fn sample_balanced(&mut self, batch_size: usize) -> Result<Batch> {
        if self.is_empty() {
            return Err(contract("cannot sample from an empty memory"));
        }
        let classes: Vec<usize> = self.entries.keys().copied().collect();
        let k = classes.len();
        let base = batch_size / k;
        let mut extra: Vec<usize> = (0..k).collect();
        extra.shuffle(&mut self.rng);
        let mut counts = vec![base; k];
        for &j in &extra[..batch_size % k] {
            counts[j] += 1;
        }
        let mut b = Batch {
            features: Vec::with_capacity(batch_size * self.feature_dim),
            labels: Vec::with_capacity(batch_size),
        };
        for (j, &c) in classes.iter().enumerate() {
            let stored = &self.entries[&c];
            let n = counts[j];
            let picks: Vec<usize> = if n <= stored.len() {
                index::sample(&mut self.rng, stored.len(), n).into_vec()
            } else {
                (0..n)
                    .map(|_| self.rng.gen_range(0..stored.len()))
                    .collect()
            };
            for i in picks {
                b.features.extend_from_slice(&stored[i]);
                b.labels.push(c);
            }
        }
        Ok(b)
    }
}
