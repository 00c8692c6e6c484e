//! Reservoir-sampled replay memory of inputs with the logits the model gave
//! them when they were stored.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng::{substream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEntry {
    pub input: Vec<f64>,
    pub logits: Vec<f64>,
    pub task_id: usize,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: Vec<ReplayEntry>,
    seen: u64,
    reservoir_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity.min(1 << 16)),
            seen: 0,
            reservoir_rng: substream(seed, Stream::Reservoir, 0),
            sample_rng: substream(seed, Stream::Reservoir, 1),
        }
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

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    /// Registers one streamed item and returns the slot it should occupy, or
    /// `None` if the reservoir rejects it. Every returned slot must be
    /// [`place`](Self::place)d, in the order offered.
    pub fn offer(&mut self) -> Option<usize> {
        self.seen += 1;
        if self.capacity == 0 {
            return None;
        }
        if self.seen <= self.capacity as u64 {
            return Some(self.seen as usize - 1);
        }
        let j = self.reservoir_rng.random_range(0..self.seen);
        (j < self.capacity as u64).then_some(j as usize)
    }

    /// Stores `entry` at a slot returned by [`offer`](Self::offer).
    pub fn place(&mut self, slot: usize, entry: ReplayEntry) {
        assert!(slot <= self.entries.len(), "replay slot {slot} placed out of order");
        if slot == self.entries.len() {
            self.entries.push(entry);
        } else {
            self.entries[slot] = entry;
        }
    }

    /// Up to `k` distinct entry indices, uniformly at random.
    pub fn sample(&mut self, k: usize) -> Vec<usize> {
        let k = k.min(self.entries.len());
        index::sample(&mut self.sample_rng, self.entries.len(), k).into_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(buf: &mut ReplayBuffer, n: usize) {
        for i in 0..n {
            if let Some(slot) = buf.offer() {
                buf.place(
                    slot,
                    ReplayEntry {
                        input: vec![i as f64],
                        logits: vec![0.0, 0.0],
                        task_id: 0,
                    },
                );
            }
        }
    }

    #[test]
    fn never_exceeds_capacity() {
        let mut buf = ReplayBuffer::new(10, 3);
        for n in 1..=50 {
            stream(&mut buf, 1);
            assert_eq!(buf.len(), n.min(10));
        }
        assert_eq!(buf.seen(), 50);
    }

    #[test]
    fn batched_offers_reserve_distinct_slots() {
        let mut buf = ReplayBuffer::new(4, 0);
        let slots: Vec<_> = (0..3).map(|_| buf.offer()).collect();
        assert_eq!(slots, vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn zero_capacity_stays_empty() {
        let mut buf = ReplayBuffer::new(0, 3);
        stream(&mut buf, 20);
        assert!(buf.is_empty());
        assert!(buf.sample(5).is_empty());
    }

    #[test]
    fn sample_is_distinct() {
        let mut buf = ReplayBuffer::new(8, 1);
        stream(&mut buf, 8);
        let mut s = buf.sample(5);
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 5);
    }
}
