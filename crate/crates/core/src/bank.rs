//! Class-keyed embedding memory and reference-frame sampling for video.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

/// Tolerance on `| |v| - 1 |` for vectors entering the bank.
pub const UNIT_TOL: f64 = 1e-6;

/// Per-class FIFO queues of detached unit embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    dim: usize,
    capacity: usize,
    queues: Vec<VecDeque<Vec<f64>>>,
    pub pushed: u64,
    pub evicted: u64,
}

impl FeatureBank {
    pub fn new(num_classes: usize, dim: usize, capacity: usize) -> Result<Self> {
        if num_classes == 0 || dim == 0 || capacity == 0 {
            return Err(Error::invalid("bank", "classes, dim and capacity must be positive"));
        }
        Ok(FeatureBank {
            dim,
            capacity,
            queues: vec![VecDeque::with_capacity(capacity); num_classes],
            pushed: 0,
            evicted: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_classes(&self) -> usize {
        self.queues.len()
    }

    pub fn len(&self, class: usize) -> usize {
        self.queues.get(class).map_or(0, VecDeque::len)
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(VecDeque::is_empty)
    }

    /// Stored vectors of one class, oldest first.
    pub fn queue(&self, class: usize) -> impl Iterator<Item = &[f64]> {
        self.queues[class].iter().map(Vec::as_slice)
    }

    /// Appends `rows` (flat, `dim` values each) to a class queue, evicting
    /// the oldest entries beyond capacity. Nothing is stored on error.
    pub fn push(&mut self, class: usize, rows: &[f64]) -> Result<()> {
        if class >= self.queues.len() {
            return Err(Error::IndexOutOfRange {
                op: "bank_push",
                index: class,
                extent: self.queues.len(),
            });
        }
        if rows.len() % self.dim != 0 {
            return Err(Error::invalid(
                "bank_push",
                format!("{} values is not a multiple of dim {}", rows.len(), self.dim),
            ));
        }
        for (i, v) in rows.chunks(self.dim).enumerate() {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::invalid("bank_push", format!("row {i} has norm {n}")));
            }
        }
        let q = &mut self.queues[class];
        for v in rows.chunks(self.dim) {
            if q.len() == self.capacity {
                q.pop_front();
                self.evicted += 1;
            }
            q.push_back(v.to_vec());
            self.pushed += 1;
        }
        Ok(())
    }

    /// Uniform sample of `min(n, len)` stored vectors without replacement.
    pub fn sample<R: Rng + ?Sized>(&self, class: usize, n: usize, rng: &mut R) -> Vec<&[f64]> {
        let Some(q) = self.queues.get(class) else {
            return Vec::new();
        };
        let k = n.min(q.len());
        if k == 0 {
            return Vec::new();
        }
        index::sample(rng, q.len(), k)
            .into_iter()
            .map(|i| q[i].as_slice())
            .collect()
    }

    /// Replaces a class queue wholesale, used when restoring checkpoints.
    pub(crate) fn restore_queue(&mut self, class: usize, rows: &[f64]) -> Result<()> {
        let q = self
            .queues
            .get_mut(class)
            .ok_or_else(|| Error::Checkpoint(format!("bank class {class} out of range")))?;
        if rows.len() % self.dim != 0 || rows.len() / self.dim > self.capacity {
            return Err(Error::Checkpoint(format!("bank class {class} has a bad extent")));
        }
        q.clear();
        q.extend(rows.chunks(self.dim).map(<[f64]>::to_vec));
        Ok(())
    }
}

pub fn bank_push(bank: &mut FeatureBank, class: usize, rows: &[f64]) -> Result<()> {
    bank.push(class, rows)
}

pub fn bank_sample<'a, R: Rng + ?Sized>(
    bank: &'a FeatureBank,
    class: usize,
    n: usize,
    rng: &mut R,
) -> Vec<&'a [f64]> {
    bank.sample(class, n, rng)
}

/// Admissible frame distances between a key and its reference frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalRange {
    pub min_gap: usize,
    pub max_gap: usize,
}

impl TemporalRange {
    pub const SHORT: TemporalRange = TemporalRange {
        min_gap: 1,
        max_gap: 3,
    };
    pub const LONG: TemporalRange = TemporalRange {
        min_gap: 4,
        max_gap: 16,
    };

    pub fn new(min_gap: usize, max_gap: usize) -> Result<Self> {
        if min_gap == 0 || min_gap > max_gap {
            return Err(Error::Config(format!(
                "temporal range [{min_gap}, {max_gap}] must satisfy 1 <= min <= max"
            )));
        }
        Ok(TemporalRange { min_gap, max_gap })
    }
}

impl Default for TemporalRange {
    fn default() -> Self {
        TemporalRange::SHORT
    }
}

/// Picks a reference frame `key ± d` with `d` in the range. The direction is
/// uniform among those with at least one in-bounds distance, then `d` is
/// uniform among the in-bounds distances in that direction.
pub fn sample_reference_frame<R: Rng + ?Sized>(
    key: usize,
    clip_len: usize,
    range: TemporalRange,
    rng: &mut R,
) -> Result<usize> {
    if key >= clip_len {
        return Err(Error::Sampler(format!("key {key} outside clip of {clip_len}")));
    }
    let fwd_max = range.max_gap.min(clip_len - 1 - key);
    let back_max = range.max_gap.min(key);
    let fwd = fwd_max >= range.min_gap;
    let back = back_max >= range.min_gap;
    let forward = match (fwd, back) {
        (false, false) => {
            return Err(Error::Sampler(format!(
                "no reference within [{}, {}] of frame {key} in a clip of {clip_len}",
                range.min_gap, range.max_gap
            )))
        }
        (true, false) => true,
        (false, true) => false,
        (true, true) => rng.gen_bool(0.5),
    };
    if forward {
        Ok(key + rng.gen_range(range.min_gap..=fwd_max))
    } else {
        Ok(key - rng.gen_range(range.min_gap..=back_max))
    }
}
