use std::cmp::Ordering;

use crate::driver::DispatchId;
use crate::scheduler::StepKey;

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    FragmentComplete {
        job: usize,
        step: usize,
        dispatch: DispatchId,
    },
    EvictionExpire {
        key: StepKey,
    },
    NodeFailure {
        node: usize,
    },
    DriverRestart {
        job_id: String,
    },
    JobArrival {
        job: usize,
    },
    RoundTick,
    SimulationEnd,
}

impl EventKind {
    /// Tie-break among events at the same timestamp.
    pub fn priority(&self) -> u8 {
        match self {
            EventKind::FragmentComplete { .. } => 0,
            EventKind::EvictionExpire { .. } => 1,
            EventKind::NodeFailure { .. } => 2,
            EventKind::DriverRestart { .. } => 3,
            EventKind::JobArrival { .. } => 4,
            EventKind::RoundTick => 5,
            EventKind::SimulationEnd => 6,
        }
    }
}

/// Ordered by time, then kind priority, then insertion sequence. `Ord` is
/// reversed so that `BinaryHeap` pops the earliest event.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
}

impl Event {
    fn sort_key(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.kind.priority().cmp(&other.kind.priority()))
            .then(self.seq.cmp(&other.seq))
    }
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        other.sort_key(self)
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BinaryHeap;

    #[test]
    fn heap_pops_time_then_priority_then_sequence() {
        let mut heap = BinaryHeap::new();
        heap.push(Event { time: 30.0, seq: 0, kind: EventKind::RoundTick });
        heap.push(Event { time: 30.0, seq: 1, kind: EventKind::JobArrival { job: 0 } });
        heap.push(Event { time: 10.0, seq: 2, kind: EventKind::SimulationEnd });
        heap.push(Event { time: 30.0, seq: 3, kind: EventKind::FragmentComplete { job: 0, step: 0, dispatch: 0 } });
        heap.push(Event { time: 30.0, seq: 4, kind: EventKind::JobArrival { job: 1 } });
        let order: Vec<_> = std::iter::from_fn(|| heap.pop()).map(|e| e.seq).collect();
        assert_eq!(order, vec![2, 3, 1, 4, 0]);
    }
}
