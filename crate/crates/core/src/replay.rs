//! Fixed-capacity replay memory with reservoir insertion and uniform sampling.

use rand::Rng;

use crate::backbone::{Backbone, Mode};
use crate::data::static_encode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Logits kept alongside a stored sample.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredLogits {
    None,
    /// Time-averaged logits `[C]` at the training window.
    Averaged(Tensor<f32>),
    /// Logit sequences `[T/2, C]`, `[T, C]`, `[2T, C]` from one model snapshot.
    MultiRes {
        half: Tensor<f32>,
        full: Tensor<f32>,
        double: Tensor<f32>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayEntry {
    /// Raw `[C, H, W]` pixels, normalized and augmented again on replay.
    pub x: Vec<f32>,
    pub y: usize,
    pub logits: StoredLogits,
    pub task: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: Vec<ReplayEntry>,
    seen: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity.min(1 << 16)),
            seen: 0,
        }
    }

    pub(crate) fn from_parts(capacity: usize, entries: Vec<ReplayEntry>, seen: u64) -> Result<Self> {
        if entries.len() as u64 != seen.min(capacity as u64) {
            return Err(Error::invalid(
                "replay buffer",
                format!(
                    "{} entries after {seen} insertions into capacity {capacity}",
                    entries.len()
                ),
            ));
        }
        Ok(Self {
            capacity,
            entries,
            seen,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of stream items offered so far.
    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &ReplayEntry {
        &self.entries[i]
    }

    /// Offer the next stream item: returns the slot it should occupy, if any.
    /// Several slots may be reserved before they are filled, but they must be
    /// filled with [`ReplayBuffer::place`] in reservation order.
    pub fn reserve(&mut self, rng: &mut impl Rng) -> Option<usize> {
        let slot = if (self.seen as usize) < self.capacity {
            Some(self.seen as usize)
        } else if self.capacity == 0 {
            None
        } else {
            let j = rng.random_range(0..=self.seen);
            (j < self.capacity as u64).then_some(j as usize)
        };
        self.seen += 1;
        slot
    }

    pub fn place(&mut self, slot: usize, entry: ReplayEntry) -> Result<()> {
        match slot.cmp(&self.entries.len()) {
            std::cmp::Ordering::Less => self.entries[slot] = entry,
            std::cmp::Ordering::Equal => self.entries.push(entry),
            std::cmp::Ordering::Greater => {
                return Err(Error::invalid(
                    "replay slot",
                    format!("{slot} placed before slot {}", self.entries.len()),
                ))
            }
        }
        Ok(())
    }

    /// Reservoir insertion; returns the slot written.
    pub fn insert(&mut self, entry: ReplayEntry, rng: &mut impl Rng) -> Option<usize> {
        let slot = self.reserve(rng)?;
        self.place(slot, entry).expect("reserved slot is placeable");
        Some(slot)
    }

    /// Replace the logits of an existing entry.
    pub fn refresh_logits(&mut self, slot: usize, logits: StoredLogits) {
        self.entries[slot].logits = logits;
    }

    /// `k` slot indices drawn uniformly with replacement.
    pub fn sample(&self, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if k == 0 {
            return Ok(Vec::new());
        }
        if self.entries.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..k).map(|_| rng.random_range(0..self.entries.len())).collect())
    }

    pub fn max_task(&self) -> Option<usize> {
        self.entries.iter().map(|e| e.task).max()
    }
}

/// Logits of `model` on `x` (`[B, C, H, W]`, already normalized) statically
/// encoded at `T/2`, `T` and `2T` steps. Nothing is recorded for gradients.
pub fn multi_resolution_logits(
    model: &Backbone<f32>,
    x: &Tensor<f32>,
    steps: usize,
    mode: Mode,
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    if steps < 2 || !steps.is_multiple_of(2) {
        return Err(Error::invalid(
            "time steps",
            format!("T = {steps} must be even and >= 2"),
        ));
    }
    let run = |t: usize| model.infer(&static_encode(x, t)?, mode);
    Ok((run(steps / 2)?, run(steps)?, run(2 * steps)?))
}

/// Column `b` of a `[T, B, C]` tensor as `[T, C]`.
pub fn sample_sequence(h: &Tensor<f32>, b: usize) -> Result<Tensor<f32>> {
    let s = h.shape();
    if s.len() != 3 || b >= s[1] {
        return Err(Error::shape("sample_sequence", format!("sample {b} of {s:?}")));
    }
    let (t, batch, c) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(t * c);
    for step in 0..t {
        let off = (step * batch + b) * c;
        data.extend_from_slice(&h.data()[off..off + c]);
    }
    Tensor::new(&[t, c], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(y: usize) -> ReplayEntry {
        ReplayEntry {
            x: vec![y as f32],
            y,
            logits: StoredLogits::None,
            task: 0,
        }
    }

    #[test]
    fn fills_before_replacing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut buf = ReplayBuffer::new(5);
        for i in 0..5 {
            assert_eq!(buf.insert(entry(i), &mut rng), Some(i));
        }
        assert_eq!(
            buf.entries().iter().map(|e| e.y).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 4]
        );
        for i in 5..100 {
            buf.insert(entry(i), &mut rng);
            assert_eq!(buf.len(), 5);
        }
        assert_eq!(buf.seen(), 100);
    }

    #[test]
    fn sampling_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut buf = ReplayBuffer::new(3);
        assert!(buf.sample(0, &mut rng).unwrap().is_empty());
        assert!(matches!(buf.sample(2, &mut rng), Err(Error::EmptyBuffer)));
        buf.insert(entry(9), &mut rng);
        assert_eq!(buf.sample(3, &mut rng).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn sequence_column() {
        let h = Tensor::<f32>::from_f64(&[2, 2, 1], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(sample_sequence(&h, 1).unwrap().to_f64_vec(), vec![2., 4.]);
    }
}
