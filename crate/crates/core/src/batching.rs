//! Mini-batch samplers and batch-hard mining.
//!
//! Both samplers are pure functions of `(labels, seed, counter)`: the random
//! sampler draws epoch `e` from its own stream, the PK sampler draws batch `b`
//! from its own stream. Their state is just counters, which checkpoints store.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Random,
    IdBalanced,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiniBatch {
    /// Indices into the training split.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub cameras: Vec<usize>,
    pub strategy: Strategy,
    /// Last, short batch of a random epoch.
    pub partial: bool,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn gather(values: &[usize], indices: &[usize]) -> Vec<usize> {
    indices.iter().map(|&i| values[i]).collect()
}

/// Seeded epochs of a uniform permutation, chunked into batches.
#[derive(Clone, Debug)]
pub struct RandomSampler {
    labels: Vec<usize>,
    cameras: Vec<usize>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

impl RandomSampler {
    pub fn new(labels: &[usize], cameras: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Dataset("cannot sample from an empty split".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if cameras.len() != labels.len() {
            return Err(Error::Dataset("labels and cameras differ in length".into()));
        }
        let mut s = Self {
            labels: labels.to_vec(),
            cameras: cameras.to_vec(),
            batch_size,
            seed,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
        };
        s.order = s.permutation(0);
        Ok(s)
    }

    /// Batches per epoch, counting a trailing partial batch.
    pub fn batches_per_epoch(&self) -> usize {
        self.labels.len().div_ceil(self.batch_size)
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.labels.len()).collect();
        order.shuffle(&mut rng::stream(self.seed, tag::RANDOM_EPOCH, epoch));
        order
    }

    /// `(epoch, cursor)` of the next batch.
    pub fn position(&self) -> (u64, usize) {
        (self.epoch, self.cursor)
    }

    pub fn seek(&mut self, epoch: u64, cursor: usize) -> Result<()> {
        if cursor >= self.labels.len() {
            return Err(Error::Checkpoint(format!(
                "sampler cursor {cursor} beyond split of {}",
                self.labels.len()
            )));
        }
        self.epoch = epoch;
        self.cursor = cursor;
        self.order = self.permutation(epoch);
        Ok(())
    }

    /// All batches of one epoch, independent of the sampler position.
    pub fn epoch_batches(&self, epoch: u64) -> Vec<MiniBatch> {
        let order = self.permutation(epoch);
        order
            .chunks(self.batch_size)
            .map(|chunk| self.make(chunk.to_vec()))
            .collect()
    }

    fn make(&self, indices: Vec<usize>) -> MiniBatch {
        MiniBatch {
            labels: gather(&self.labels, &indices),
            cameras: gather(&self.cameras, &indices),
            partial: indices.len() < self.batch_size,
            strategy: Strategy::Random,
            indices,
        }
    }
}

impl Iterator for RandomSampler {
    type Item = MiniBatch;

    fn next(&mut self) -> Option<MiniBatch> {
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.make(self.order[self.cursor..end].to_vec());
        if end == self.order.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.order = self.permutation(self.epoch);
        } else {
            self.cursor = end;
        }
        Some(batch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PkPolicy {
    /// Identities with fewer than K images never appear.
    Exclude,
    /// Such identities are drawn with replacement.
    WithReplacement,
}

/// `P` identities × `K` images per batch, i.i.d. across batches.
#[derive(Clone, Debug)]
pub struct PkSampler {
    labels: Vec<usize>,
    cameras: Vec<usize>,
    by_identity: Vec<Vec<usize>>,
    p: usize,
    k: usize,
    policy: PkPolicy,
    seed: u64,
    counter: u64,
}

impl PkSampler {
    pub fn new(
        labels: &[usize],
        cameras: &[usize],
        p: usize,
        k: usize,
        policy: PkPolicy,
        seed: u64,
    ) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(Error::Config("P and K must be positive".into()));
        }
        if cameras.len() != labels.len() {
            return Err(Error::Dataset("labels and cameras differ in length".into()));
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        let total = groups.len();
        let by_identity: Vec<Vec<usize>> = groups
            .into_values()
            .filter(|imgs| policy == PkPolicy::WithReplacement || imgs.len() >= k)
            .collect();
        if by_identity.len() < p {
            return Err(Error::Dataset(format!(
                "need {p} identities with at least {k} images, found {} of {total}",
                by_identity.len()
            )));
        }
        Ok(Self {
            labels: labels.to_vec(),
            cameras: cameras.to_vec(),
            by_identity,
            p,
            k,
            policy,
            seed,
            counter: 0,
        })
    }

    pub fn eligible_identities(&self) -> usize {
        self.by_identity.len()
    }

    pub fn eligible_images(&self) -> usize {
        self.by_identity.iter().map(Vec::len).sum()
    }

    /// `⌈eligible images / (P·K)⌉`.
    pub fn batches_per_epoch(&self) -> usize {
        self.eligible_images().div_ceil(self.p * self.k)
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn seek(&mut self, counter: u64) {
        self.counter = counter;
    }

    /// The `index`-th batch of the stream.
    pub fn batch(&self, index: u64) -> MiniBatch {
        let mut r = rng::stream(self.seed, tag::PK_BATCH, index);
        let ids = index::sample(&mut r, self.by_identity.len(), self.p);
        let mut indices = Vec::with_capacity(self.p * self.k);
        for id in ids.iter() {
            let imgs = &self.by_identity[id];
            if imgs.len() >= self.k {
                indices.extend(index::sample(&mut r, imgs.len(), self.k).iter().map(|j| imgs[j]));
            } else {
                debug_assert_eq!(self.policy, PkPolicy::WithReplacement);
                indices.extend((0..self.k).map(|_| imgs[r.random_range(0..imgs.len())]));
            }
        }
        MiniBatch {
            labels: gather(&self.labels, &indices),
            cameras: gather(&self.cameras, &indices),
            indices,
            strategy: Strategy::IdBalanced,
            partial: false,
        }
    }
}

impl Iterator for PkSampler {
    type Item = MiniBatch;

    fn next(&mut self) -> Option<MiniBatch> {
        let b = self.batch(self.counter);
        self.counter += 1;
        Some(b)
    }
}

/// Hardest positive and hardest negative for one anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mined {
    pub positive: Option<usize>,
    pub negative: Option<usize>,
}

/// Per anchor: farthest same-label sample (excluding itself) and nearest
/// different-label sample, ties to the smallest index.
///
/// `dist` is a row-major `n × n` matrix. Debug builds reject matrices that are
/// not square, symmetric, non-negative with a zero diagonal.
pub fn batch_hard_mine<T: Element>(dist: &[T], labels: &[usize]) -> Result<Vec<Mined>> {
    let n = labels.len();
    if dist.len() != n * n {
        return Err(Error::invalid(
            "batch_hard_mine",
            format!("{} distances for {n} labels", dist.len()),
        ));
    }
    if cfg!(debug_assertions) {
        for i in 0..n {
            if dist[i * n + i] != T::zero() {
                return Err(Error::invalid("batch_hard_mine", "nonzero diagonal"));
            }
            for j in 0..i {
                let (a, b) = (dist[i * n + j], dist[j * n + i]);
                if a != b || a < T::zero() || !a.is_finite() {
                    return Err(Error::invalid(
                        "batch_hard_mine",
                        format!("matrix not symmetric non-negative at ({i}, {j})"),
                    ));
                }
            }
        }
    }
    Ok((0..n)
        .map(|i| {
            let row = &dist[i * n..(i + 1) * n];
            let mut mined = Mined {
                positive: None,
                negative: None,
            };
            for j in 0..n {
                if labels[j] == labels[i] {
                    if j != i && mined.positive.is_none_or(|p| row[j] > row[p]) {
                        mined.positive = Some(j);
                    }
                } else if mined.negative.is_none_or(|q| row[j] < row[q]) {
                    mined.negative = Some(j);
                }
            }
            mined
        })
        .collect())
}
