//! Class-balanced batch sampling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Draws batches of `classes_per_batch` classes with `batch_size / classes_per_batch`
/// samples each. Classes cycle through a shuffled queue and so do the samples within
/// each class, so every sample is used before any is repeated.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    by_class: BTreeMap<u32, Vec<usize>>,
    batch_size: usize,
    classes_per_batch: usize,
    rng: ChaCha8Rng,
    class_queue: Vec<u32>,
    sample_queues: BTreeMap<u32, Vec<usize>>,
    total: usize,
}

impl BatchSampler {
    pub fn new(labels: &[u32], batch_size: usize, classes_per_batch: usize, seed: u64) -> Result<Self> {
        if classes_per_batch == 0 || batch_size == 0 {
            return Err(Error::config("batch_size and classes_per_batch must be positive"));
        }
        if batch_size % classes_per_batch != 0 {
            return Err(Error::config(format!(
                "batch_size {batch_size} is not a multiple of classes_per_batch {classes_per_batch}"
            )));
        }
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        if by_class.len() < classes_per_batch {
            return Err(Error::config(format!(
                "{} classes available, {classes_per_batch} needed per batch",
                by_class.len()
            )));
        }
        let per_class = batch_size / classes_per_batch;
        if let Some((label, members)) = by_class.iter().find(|(_, m)| m.len() < per_class) {
            return Err(Error::config(format!(
                "class {label} has {} samples, {per_class} needed per batch",
                members.len()
            )));
        }
        Ok(Self {
            by_class,
            batch_size,
            classes_per_batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
            class_queue: Vec::new(),
            sample_queues: BTreeMap::new(),
            total: labels.len(),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        (self.total / self.batch_size).max(1)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let per_class = self.batch_size / self.classes_per_batch;
        let mut classes = Vec::with_capacity(self.classes_per_batch);
        while classes.len() < self.classes_per_batch {
            if self.class_queue.is_empty() {
                self.class_queue = self.by_class.keys().copied().collect();
                self.class_queue.shuffle(&mut self.rng);
            }
            let c = self.class_queue.pop().unwrap();
            if !classes.contains(&c) {
                classes.push(c);
            }
        }
        let mut batch = Vec::with_capacity(self.batch_size);
        for c in classes {
            let mut picked = Vec::with_capacity(per_class);
            while picked.len() < per_class {
                let queue = self.sample_queues.entry(c).or_default();
                if queue.is_empty() {
                    let mut fresh = self.by_class[&c].clone();
                    fresh.shuffle(&mut self.rng);
                    *queue = fresh;
                }
                let s = queue.pop().unwrap();
                if !picked.contains(&s) {
                    picked.push(s);
                }
            }
            batch.extend(picked);
        }
        batch
    }

    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        (0..self.batches_per_epoch()).map(|_| self.next_batch()).collect()
    }
}
