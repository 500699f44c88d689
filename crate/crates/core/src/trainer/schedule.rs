//! Seeded batch order. Each epoch is an independent shuffle derived from
//! `(seed, epoch)`, so the batch at any step can be recomputed on resume.

use rand::seq::SliceRandom;

use super::sub_rng;

const SHUFFLE_DOMAIN: u64 = 0x5348_5546;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchSchedule {
    n_samples: usize,
    batch_size: usize,
    seed: u64,
}

impl BatchSchedule {
    pub fn new(n_samples: usize, batch_size: usize, seed: u64) -> Self {
        assert!(n_samples > 0 && batch_size > 0, "empty schedule");
        Self {
            n_samples,
            batch_size,
            seed,
        }
    }

    /// Batches per epoch, counting the final short batch.
    pub fn batches_per_epoch(&self) -> usize {
        self.n_samples.div_ceil(self.batch_size)
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.n_samples).collect();
        order.shuffle(&mut sub_rng(self.seed, SHUFFLE_DOMAIN, epoch));
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Sample indices for 0-based optimizer step `step`.
    pub fn batch(&self, step: usize) -> Vec<usize> {
        let per = self.batches_per_epoch();
        self.epoch((step / per) as u64).swap_remove(step % per)
    }
}

/// One epoch of batches over `samples`.
pub fn make_batches<T: Clone>(samples: &[T], batch_size: usize, seed: u64) -> Vec<Vec<T>> {
    if samples.is_empty() {
        return Vec::new();
    }
    BatchSchedule::new(samples.len(), batch_size, seed)
        .epoch(0)
        .into_iter()
        .map(|b| b.into_iter().map(|i| samples[i].clone()).collect())
        .collect()
}
