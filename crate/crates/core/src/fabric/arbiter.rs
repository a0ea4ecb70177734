//! Output-port arbitration policies.

/// Picks one requesting input per grant.
pub trait Arbitrate {
    fn inputs(&self) -> usize;

    /// Grant one of the inputs for which `requesting` is true.
    fn grant(&mut self, requesting: &mut dyn FnMut(usize) -> bool) -> Option<usize>;
}

/// Round-robin: the first requester strictly after the last grant wins.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundRobin {
    inputs: usize,
    last_grant: usize,
}

impl RoundRobin {
    /// Starts so that input 0 has the highest priority.
    pub fn new(inputs: usize) -> Self {
        assert!(inputs > 0, "arbiter needs at least one input");
        RoundRobin {
            inputs,
            last_grant: inputs - 1,
        }
    }

    pub fn with_last_grant(inputs: usize, last_grant: usize) -> Self {
        assert!(last_grant < inputs);
        RoundRobin { inputs, last_grant }
    }

    pub fn last_grant(&self) -> usize {
        self.last_grant
    }
}

impl Arbitrate for RoundRobin {
    fn inputs(&self) -> usize {
        self.inputs
    }

    fn grant(&mut self, requesting: &mut dyn FnMut(usize) -> bool) -> Option<usize> {
        for i in 1..=self.inputs {
            let idx = (self.last_grant + i) % self.inputs;
            if requesting(idx) {
                self.last_grant = idx;
                return Some(idx);
            }
        }
        None
    }
}

/// Lowest index wins. Only used as a contrast to round-robin in tests and
/// experiments.
#[derive(Clone, Debug)]
pub struct FixedPriority {
    inputs: usize,
}

impl FixedPriority {
    pub fn new(inputs: usize) -> Self {
        FixedPriority { inputs }
    }
}

impl Arbitrate for FixedPriority {
    fn inputs(&self) -> usize {
        self.inputs
    }

    fn grant(&mut self, requesting: &mut dyn FnMut(usize) -> bool) -> Option<usize> {
        (0..self.inputs).find(|&i| requesting(i))
    }
}

/// Grant from an explicit request set. Panics on an empty set.
pub fn rr_arbitrate(requests: &[usize], state: &mut RoundRobin) -> usize {
    assert!(!requests.is_empty(), "arbitration without requests");
    state
        .grant(&mut |i| requests.contains(&i))
        .expect("request index out of range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grants_next_after_last() {
        let mut rr = RoundRobin::with_last_grant(3, 0);
        assert_eq!(rr_arbitrate(&[0, 1, 2], &mut rr), 1);
        assert_eq!(rr.last_grant(), 1);
    }

    #[test]
    fn single_requester() {
        let mut rr = RoundRobin::with_last_grant(3, 0);
        assert_eq!(rr_arbitrate(&[2], &mut rr), 2);
    }

    #[test]
    fn wraps_to_last_granted() {
        let mut rr = RoundRobin::with_last_grant(3, 0);
        assert_eq!(rr_arbitrate(&[0], &mut rr), 0);
    }

    #[test]
    fn fixed_priority_starves() {
        let mut fp = FixedPriority::new(2);
        for _ in 0..10 {
            assert_eq!(fp.grant(&mut |_| true), Some(0));
        }
    }

    proptest! {
        // With every input backlogged, grant counts over any window differ
        // by at most one.
        #[test]
        fn backlogged_inputs_are_served_fairly(
            inputs in 1usize..17,
            start in 0usize..16,
            window in 1usize..200,
            offset in 0usize..50,
        ) {
            let mut rr = RoundRobin::with_last_grant(inputs, start % inputs);
            for _ in 0..offset {
                rr.grant(&mut |_| true);
            }
            let mut counts = vec![0usize; inputs];
            for _ in 0..window {
                counts[rr.grant(&mut |_| true).unwrap()] += 1;
            }
            let max = *counts.iter().max().unwrap();
            let min = *counts.iter().min().unwrap();
            prop_assert!(max - min <= 1);
        }

        // A requester is never passed over more than `inputs - 1` times.
        #[test]
        fn bounded_wait(
            masks in proptest::collection::vec(1u32..(1 << 6), 1..100),
        ) {
            let n = 6;
            let mut rr = RoundRobin::new(n);
            let mut waited = [0usize; 6];
            for mask in masks {
                let g = rr.grant(&mut |i| mask & (1 << i) != 0).unwrap();
                for (i, w) in waited.iter_mut().enumerate() {
                    if i == g {
                        *w = 0;
                    } else if mask & (1 << i) != 0 {
                        *w += 1;
                        prop_assert!(*w < n);
                    } else {
                        *w = 0;
                    }
                }
            }
        }
    }
}
