//! Bounded FIFO with per-entry readiness, used at every switch input.

use std::collections::VecDeque;

use crate::model::SimTime;

#[derive(Clone, Debug)]
pub struct FifoEntry<T> {
    pub item: T,
    pub bytes: u64,
    /// First flit available at the FIFO output.
    pub head_at: SimTime,
    /// Last flit written into the FIFO.
    pub tail_at: SimTime,
}

/// A full FIFO rejects pushes; the producer is expected to hold the item
/// (backpressure). Nothing is ever dropped here.
#[derive(Clone, Debug)]
pub struct FifoChannel<T> {
    depth: usize,
    width_bits: u64,
    entries: VecDeque<FifoEntry<T>>,
    high_water: usize,
}

impl<T> FifoChannel<T> {
    pub fn new(depth: usize, width_bits: u64) -> Self {
        assert!(depth > 0, "fifo depth must be positive");
        FifoChannel {
            depth,
            width_bits,
            entries: VecDeque::with_capacity(depth.min(64)),
            high_water: 0,
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width_bits(&self) -> u64 {
        self.width_bits
    }

    pub fn occupancy(&self) -> usize {
        self.entries.len()
    }

    pub fn high_water(&self) -> usize {
        self.high_water
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_space(&self) -> bool {
        self.entries.len() < self.depth
    }

    pub fn push(&mut self, entry: FifoEntry<T>) -> Result<(), FifoEntry<T>> {
        if !self.has_space() {
            return Err(entry);
        }
        debug_assert!(
            self.entries
                .back()
                .is_none_or(|last| last.head_at <= entry.head_at),
            "fifo entries must become ready in order"
        );
        self.entries.push_back(entry);
        self.high_water = self.high_water.max(self.entries.len());
        Ok(())
    }

    pub fn head(&self) -> Option<&FifoEntry<T>> {
        self.entries.front()
    }

    pub fn head_ready_at(&self) -> Option<SimTime> {
        self.entries.front().map(|e| e.head_at)
    }

    /// True when the head entry can leave at `now`.
    pub fn head_ready(&self, now: SimTime) -> bool {
        self.entries.front().is_some_and(|e| e.head_at <= now)
    }

    pub fn pop(&mut self) -> Option<FifoEntry<T>> {
        self.entries.pop_front()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FifoEntry<T>> {
        self.entries.iter()
    }
}
