//! Packet-slot ownership.
//!
//! Every slot moves Free → Assigned → Loaded → CoreOwned → Transmitting →
//! Free, optionally parking in Held between CoreOwned and Transmitting while
//! the reorder engine waits for a missing segment. Any other transition is
//! a model bug and is reported as an error.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SlotState {
    Free,
    /// Granted by the scheduler; the packet is in the fabric.
    Assigned,
    /// Resident in packet memory; descriptor queued for the core.
    Loaded,
    CoreOwned,
    /// Parked by the reorder engine.
    Held,
    /// Being read out (or dropped) by the wrapper.
    Transmitting,
}

impl SlotState {
    fn may_become(self, next: SlotState) -> bool {
        use SlotState::*;
        matches!(
            (self, next),
            (Free, Assigned)
                | (Assigned, Loaded)
                | (Loaded, CoreOwned)
                | (CoreOwned, Held)
                | (CoreOwned, Transmitting)
                | (Held, Transmitting)
                | (Transmitting, Free)
        )
    }
}

impl fmt::Display for SlotState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SlotError {
    #[error("slot {slot}: illegal transition {from} -> {to}")]
    Illegal {
        slot: u16,
        from: SlotState,
        to: SlotState,
    },
    #[error("slot {0} out of range")]
    OutOfRange(u16),
}

#[derive(Clone, Debug)]
pub struct SlotTable {
    states: Vec<SlotState>,
    counts: [u32; 6],
}

fn idx(s: SlotState) -> usize {
    s as usize
}

impl SlotTable {
    pub fn new(count: u16) -> Self {
        let mut counts = [0; 6];
        counts[idx(SlotState::Free)] = count as u32;
        SlotTable {
            states: vec![SlotState::Free; count as usize],
            counts,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, slot: u16) -> SlotState {
        self.states[slot as usize]
    }

    pub fn count(&self, s: SlotState) -> u32 {
        self.counts[idx(s)]
    }

    pub fn non_free(&self) -> u32 {
        self.states.len() as u32 - self.count(SlotState::Free)
    }

    pub fn transition(&mut self, slot: u16, to: SlotState) -> Result<(), SlotError> {
        let from = *self
            .states
            .get(slot as usize)
            .ok_or(SlotError::OutOfRange(slot))?;
        if !from.may_become(to) {
            return Err(SlotError::Illegal { slot, from, to });
        }
        self.states[slot as usize] = to;
        self.counts[idx(from)] -= 1;
        self.counts[idx(to)] += 1;
        Ok(())
    }

    /// Full recount; used by paranoid checking.
    pub fn verify_counts(&self) -> bool {
        let mut c = [0u32; 6];
        for s in &self.states {
            c[idx(*s)] += 1;
        }
        c == self.counts
    }

    pub fn reset(&mut self) {
        *self = SlotTable::new(self.states.len() as u16);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use SlotState::*;

    #[test]
    fn full_cycle() {
        let mut t = SlotTable::new(2);
        for s in [Assigned, Loaded, CoreOwned, Held, Transmitting, Free] {
            t.transition(1, s).unwrap();
        }
        assert_eq!(t.count(Free), 2);
        assert!(t.verify_counts());
    }

    #[test]
    fn skipping_a_state_is_rejected() {
        let mut t = SlotTable::new(1);
        t.transition(0, Assigned).unwrap();
        let err = t.transition(0, CoreOwned).unwrap_err();
        assert_eq!(
            err,
            SlotError::Illegal {
                slot: 0,
                from: Assigned,
                to: CoreOwned
            }
        );
    }

    #[test]
    fn double_free_is_rejected() {
        let mut t = SlotTable::new(1);
        assert!(t.transition(0, Free).is_err());
    }

    proptest::proptest! {
        #[test]
        fn counts_track_states(ops in proptest::collection::vec((0u16..4, 0usize..6), 0..200)) {
            let all = [Free, Assigned, Loaded, CoreOwned, Held, Transmitting];
            let mut t = SlotTable::new(4);
            for (slot, s) in ops {
                let _ = t.transition(slot, all[s]);
                proptest::prop_assert!(t.verify_counts());
            }
        }
    }
}
