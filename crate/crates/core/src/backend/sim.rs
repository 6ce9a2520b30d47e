use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::backend::{BackendError, BatchAdapter, NodePool, PoolHandle, PoolStatus};
use crate::model::PilotDescription;

struct Pending<E> {
    t: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Pending<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Pending<E> {}

impl<E> PartialOrd for Pending<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Pending<E> {
    // reversed: BinaryHeap is a max-heap and we want the earliest (t, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Discrete-event clock. Events fire in `(time, insertion order)`; time never
/// moves backwards.
pub struct SimClock<E> {
    now: f64,
    next_seq: u64,
    queue: BinaryHeap<Pending<E>>,
}

impl<E> Default for SimClock<E> {
    fn default() -> Self {
        SimClock { now: 0.0, next_seq: 0, queue: BinaryHeap::new() }
    }
}

impl<E> SimClock<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Schedules `event` at absolute time `t`. Times in the past are clamped
    /// to now.
    pub fn schedule_at(&mut self, t: f64, event: E) {
        debug_assert!(!t.is_nan(), "NaN event time");
        let t = if t < self.now { self.now } else { t };
        self.queue.push(Pending { t, seq: self.next_seq, event });
        self.next_seq += 1;
    }

    pub fn schedule_in(&mut self, delay: f64, event: E) {
        self.schedule_at(self.now + delay.max(0.0), event);
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.queue.peek().map(|p| p.t)
    }

    /// Fires the next event, advancing the clock to its time.
    pub fn pop(&mut self) -> Option<(f64, E)> {
        let p = self.queue.pop()?;
        self.now = p.t;
        Some((p.t, p.event))
    }

    /// Fires the next event if it is due at or before `t_stop`.
    pub fn pop_until(&mut self, t_stop: f64) -> Option<(f64, E)> {
        if self.peek_time()? <= t_stop {
            self.pop()
        } else {
            None
        }
    }

    /// Fires every event with time `<= t_stop` and leaves the clock at
    /// `t_stop`.
    pub fn run_until(&mut self, t_stop: f64) -> Vec<(f64, E)> {
        assert!(t_stop >= self.now, "cannot run backwards from {} to {t_stop}", self.now);
        let mut fired = Vec::new();
        while let Some(e) = self.pop_until(t_stop) {
            fired.push(e);
        }
        self.now = t_stop;
        fired
    }
}

/// Pools that activate at their `available_at_s` on a simulated clock.
#[derive(Debug, Default)]
pub struct SimAdapter {
    now: f64,
    pools: Vec<(NodePool, bool)>,
}

impl SimAdapter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance_to(&mut self, t: f64) {
        self.now = self.now.max(t);
    }

    /// The pool this pilot will receive; it is active from
    /// `available_at_s` on the simulated clock.
    pub fn acquire(p: &PilotDescription) -> Result<NodePool, BackendError> {
        p.validate()?;
        Ok(NodePool::from_description(p, p.available_at_s))
    }
}

impl BatchAdapter for SimAdapter {
    fn submit(&mut self, p: &PilotDescription) -> Result<PoolHandle, BackendError> {
        let pool = SimAdapter::acquire(p)?;
        self.pools.push((pool, false));
        Ok(PoolHandle(self.pools.len() - 1))
    }

    fn poll(&mut self, h: PoolHandle) -> Result<PoolStatus, BackendError> {
        let now = self.now;
        let (pool, canceled) = self.pools.get(h.0).ok_or_else(|| BackendError::Adapter(format!("unknown pool handle {}", h.0)))?;
        Ok(if *canceled || now >= pool.t_deadline {
            PoolStatus::Done
        } else if now >= pool.t_available {
            PoolStatus::Active
        } else {
            PoolStatus::Pending
        })
    }

    fn cancel(&mut self, h: PoolHandle) -> Result<(), BackendError> {
        let entry = self.pools.get_mut(h.0).ok_or_else(|| BackendError::Adapter(format!("unknown pool handle {}", h.0)))?;
        entry.1 = true;
        Ok(())
    }

    fn pool(&self, h: PoolHandle) -> Option<&NodePool> {
        self.pools.get(h.0).map(|(p, _)| p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::peak_concurrency;
    use crate::model::Backend;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_queue_advances_clock() {
        let mut c: SimClock<()> = SimClock::new();
        assert!(c.run_until(10.0).is_empty());
        assert_eq!(c.now(), 10.0);
    }

    #[test]
    fn ties_fire_in_insertion_order() {
        let mut c = SimClock::new();
        c.schedule_at(1.0, 'a');
        c.schedule_at(2.0, 'c');
        c.schedule_at(1.0, 'b');
        let fired: Vec<char> = c.run_until(5.0).into_iter().map(|(_, e)| e).collect();
        assert_eq!(fired, vec!['a', 'b', 'c']);
    }

    #[test]
    fn run_until_stops_at_horizon() {
        let mut c = SimClock::new();
        c.schedule_at(1.0, 1);
        c.schedule_at(3.0, 3);
        assert_eq!(c.run_until(2.0), vec![(1.0, 1)]);
        assert_eq!(c.now(), 2.0);
        assert_eq!(c.pending(), 1);
    }

    #[test]
    fn million_events_fire_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut c = SimClock::new();
        let mut expected: Vec<(f64, usize)> = Vec::with_capacity(1_000_000);
        for i in 0..1_000_000 {
            // coarse grid so many timestamps tie
            let t = (rng.random::<f64>() * 1000.0).floor() / 4.0;
            c.schedule_at(t, i);
            expected.push((t, i));
        }
        expected.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let fired = c.run_until(f64::MAX);
        assert_eq!(fired, expected);
    }

    #[test]
    fn sim_pool_activates_at_offset() {
        let mut p = PilotDescription::new("p0", 1000, 56, Backend::Sim);
        let pool = SimAdapter::acquire(&p).unwrap();
        assert_eq!(pool.total_cores(), 56_000);
        assert_eq!(pool.t_available, 0.0);

        p.available_at_s = 30.0;
        let mut a = SimAdapter::new();
        let h = a.submit(&p).unwrap();
        assert_eq!(a.poll(h).unwrap(), PoolStatus::Pending);
        a.advance_to(30.0);
        assert_eq!(a.poll(h).unwrap(), PoolStatus::Active);
        a.advance_to(30.0 + p.walltime_s);
        assert_eq!(a.poll(h).unwrap(), PoolStatus::Done);
    }

    #[test]
    fn staggered_pilots_overlap_at_most_thirteen() {
        let mut a = SimAdapter::new();
        let handles: Vec<_> = (0..31)
            .map(|i| {
                let mut p = PilotDescription::new(format!("p{i}"), 4, 56, Backend::Sim);
                p.available_at_s = i as f64 * 100.0;
                p.walltime_s = 1250.0;
                a.submit(&p).unwrap()
            })
            .collect();
        let windows: Vec<_> = handles
            .iter()
            .map(|&h| {
                let pool = a.pool(h).unwrap();
                (pool.t_available, pool.t_deadline)
            })
            .collect();
        assert_eq!(peak_concurrency(&windows), 13);
        // poll-based count inside the densest stretch agrees
        a.advance_to(1200.0);
        let active = handles.iter().filter(|&&h| a.poll(h).unwrap() == PoolStatus::Active).count();
        assert_eq!(active, 13);
    }
}
