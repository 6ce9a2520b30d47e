//! Per-pilot agent scheduler: first-fit slot placement over the pilot's
//! nodes and a windowed-FIFO queue in front of it.

use std::collections::{HashMap, VecDeque};

use thiserror::Error;

use crate::backend::NodePool;
use crate::model::TaskDescription;

/// Default number of queued tasks examined past a blocked head.
pub const DEFAULT_LOOKAHEAD: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
struct NodeSlots {
    cores: u32,
    gpus: u32,
    free_cores: u32,
    free_gpus: u32,
    core_busy: Vec<bool>,
    gpu_busy: Vec<bool>,
}

impl NodeSlots {
    fn new(cores: u32, gpus: u32) -> Self {
        NodeSlots {
            cores,
            gpus,
            free_cores: cores,
            free_gpus: gpus,
            core_busy: vec![false; cores as usize],
            gpu_busy: vec![false; gpus as usize],
        }
    }

    fn fits(&self, cores: u32, gpus: u32) -> bool {
        self.free_cores >= cores && self.free_gpus >= gpus
    }
}

fn claim(busy: &mut [bool], n: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(n as usize);
    for (i, b) in busy.iter_mut().enumerate() {
        if out.len() == n as usize {
            break;
        }
        if !*b {
            *b = true;
            out.push(i as u32);
        }
    }
    assert_eq!(out.len(), n as usize, "free count out of sync with slot bitmap");
    out
}

/// Where a task was placed: one node, specific core and GPU indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub task_uid: String,
    pub node_id: usize,
    pub core_indices: Vec<u32>,
    pub gpu_indices: Vec<u32>,
    pub t_placed: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedulerError {
    #[error("no node has {cores} free cores and {gpus} free gpus")]
    NoFit { cores: u32, gpus: u32 },
    #[error("no allocation for {0:?}")]
    UnknownAllocation(String),
    #[error("{0:?} is already allocated")]
    DuplicateAllocation(String),
}

/// Per-node core/GPU occupancy plus the table of live allocations.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotMap {
    nodes: Vec<NodeSlots>,
    allocations: HashMap<String, Placement>,
    // first node that may have a free core; everything before it is full
    first_free: usize,
}

impl SlotMap {
    pub fn new(node_shapes: impl IntoIterator<Item = (u32, u32)>) -> Self {
        SlotMap { nodes: node_shapes.into_iter().map(|(c, g)| NodeSlots::new(c, g)).collect(), allocations: HashMap::new(), first_free: 0 }
    }

    pub fn uniform(n_nodes: usize, cores: u32, gpus: u32) -> Self {
        SlotMap::new(std::iter::repeat_n((cores, gpus), n_nodes))
    }

    pub fn for_pool(pool: &NodePool) -> Self {
        SlotMap::new(pool.nodes.iter().map(|n| (n.cores, n.gpus)))
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn free_cores(&self, node: usize) -> u32 {
        self.nodes[node].free_cores
    }

    pub fn free_gpus(&self, node: usize) -> u32 {
        self.nodes[node].free_gpus
    }

    pub fn total_free_cores(&self) -> u64 {
        self.nodes.iter().map(|n| n.free_cores as u64).sum()
    }

    pub fn allocation(&self, uid: &str) -> Option<&Placement> {
        self.allocations.get(uid)
    }

    pub fn allocations(&self) -> impl Iterator<Item = &Placement> {
        self.allocations.values()
    }

    pub fn n_allocations(&self) -> usize {
        self.allocations.len()
    }

    /// First-fit: the lowest-numbered node with enough free cores and GPUs.
    /// On failure nothing changes.
    pub fn place(&mut self, uid: &str, cores: u32, gpus: u32, t: f64) -> Result<Placement, SchedulerError> {
        if self.allocations.contains_key(uid) {
            return Err(SchedulerError::DuplicateAllocation(uid.to_string()));
        }
        let start = if cores > 0 { self.first_free } else { 0 };
        let node_id = (start..self.nodes.len()).find(|&i| self.nodes[i].fits(cores, gpus)).ok_or(SchedulerError::NoFit { cores, gpus })?;
        let node = &mut self.nodes[node_id];
        let core_indices = claim(&mut node.core_busy, cores);
        let gpu_indices = claim(&mut node.gpu_busy, gpus);
        node.free_cores -= cores;
        node.free_gpus -= gpus;
        while self.first_free < self.nodes.len() && self.nodes[self.first_free].free_cores == 0 {
            self.first_free += 1;
        }
        let placement = Placement { task_uid: uid.to_string(), node_id, core_indices, gpu_indices, t_placed: t };
        self.allocations.insert(uid.to_string(), placement.clone());
        Ok(placement)
    }

    pub fn place_task(&mut self, t: &TaskDescription, now: f64) -> Result<Placement, SchedulerError> {
        self.place(&t.uid, t.cores, t.gpus, now)
    }

    pub fn release(&mut self, uid: &str) -> Result<Placement, SchedulerError> {
        let p = self.allocations.remove(uid).ok_or_else(|| SchedulerError::UnknownAllocation(uid.to_string()))?;
        let node = &mut self.nodes[p.node_id];
        for &c in &p.core_indices {
            node.core_busy[c as usize] = false;
        }
        for &g in &p.gpu_indices {
            node.gpu_busy[g as usize] = false;
        }
        node.free_cores += p.core_indices.len() as u32;
        node.free_gpus += p.gpu_indices.len() as u32;
        assert!(node.free_cores <= node.cores && node.free_gpus <= node.gpus, "oversubscription on release");
        if !p.core_indices.is_empty() {
            self.first_free = self.first_free.min(p.node_id);
        }
        Ok(p)
    }

    /// Recomputes every node's free counts from the allocation table and
    /// compares them with the tracked counters.
    pub fn check_consistency(&self) -> Result<(), String> {
        let mut used: Vec<(u64, u64)> = vec![(0, 0); self.nodes.len()];
        for p in self.allocations.values() {
            used[p.node_id].0 += p.core_indices.len() as u64;
            used[p.node_id].1 += p.gpu_indices.len() as u64;
        }
        for (i, (n, (c, g))) in self.nodes.iter().zip(used).enumerate() {
            if c + n.free_cores as u64 != n.cores as u64 || g + n.free_gpus as u64 != n.gpus as u64 {
                return Err(format!(
                    "node {i}: allocated {c}/{g} + free {}/{} != capacity {}/{}",
                    n.free_cores, n.free_gpus, n.cores, n.gpus
                ));
            }
        }
        Ok(())
    }
}

/// Windowed FIFO queue feeding a [`SlotMap`]. Tasks are placed in arrival
/// order; a head task that does not fit blocks only tasks beyond the
/// lookahead window.
#[derive(Debug)]
pub struct AgentScheduler {
    slots: SlotMap,
    queue: VecDeque<TaskDescription>,
    lookahead: usize,
}

impl AgentScheduler {
    pub fn new(slots: SlotMap) -> Self {
        AgentScheduler { slots, queue: VecDeque::new(), lookahead: DEFAULT_LOOKAHEAD }
    }

    pub fn with_lookahead(mut self, lookahead: usize) -> Self {
        self.lookahead = lookahead.max(1);
        self
    }

    pub fn slots(&self) -> &SlotMap {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut SlotMap {
        &mut self.slots
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn enqueue(&mut self, t: TaskDescription) {
        self.queue.push_back(t);
    }

    /// Places every task in the lookahead window that currently fits, in
    /// queue order.
    pub fn schedule(&mut self, now: f64) -> Vec<(TaskDescription, Placement)> {
        let mut placed = Vec::new();
        let mut i = 0;
        let mut examined = 0;
        while i < self.queue.len() && examined < self.lookahead {
            examined += 1;
            let t = &self.queue[i];
            match self.slots.place_task(t, now) {
                Ok(p) => {
                    let t = self.queue.remove(i).expect("index in range");
                    placed.push((t, p));
                }
                Err(_) => {
                    i += 1;
                    if self.slots.total_free_cores() == 0 {
                        break;
                    }
                }
            }
        }
        placed
    }

    pub fn release(&mut self, uid: &str) -> Result<Placement, SchedulerError> {
        self.slots.release(uid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Value;
    use proptest::prelude::*;

    /// Brute-force first fit over explicit free counts.
    fn oracle_first_fit(free: &[(u32, u32)], cores: u32, gpus: u32) -> Option<usize> {
        free.iter().position(|&(c, g)| c >= cores && g >= gpus)
    }

    /// Map whose node `i` has exactly `free_cores[i]` free cores.
    fn with_free(free_cores: &[u32], cap: u32) -> SlotMap {
        let mut s = SlotMap::uniform(free_cores.len(), cap, 0);
        for (i, &f) in free_cores.iter().enumerate() {
            let used = cap - f;
            if used == 0 {
                continue;
            }
            let node = &mut s.nodes[i];
            for c in 0..used as usize {
                node.core_busy[c] = true;
            }
            node.free_cores = f;
            let uid = format!("fill{i}");
            s.allocations.insert(
                uid.clone(),
                Placement { task_uid: uid, node_id: i, core_indices: (0..used).collect(), gpu_indices: vec![], t_placed: 0.0 },
            );
        }
        assert!(s.check_consistency().is_ok());
        s
    }

    #[test]
    fn first_fit_on_empty_pool() {
        let mut s = SlotMap::uniform(2, 56, 0);
        let p = s.place("t", 56, 0, 0.0).unwrap();
        assert_eq!(p.node_id, 0);
        assert_eq!(s.free_cores(0), 0);
        assert_eq!(s.free_cores(1), 56);
        assert_eq!(p.core_indices, (0..56).collect::<Vec<_>>());
    }

    #[test]
    fn skips_nodes_without_room() {
        let mut s = with_free(&[3, 5], 8);
        assert_eq!(oracle_first_fit(&[(3, 0), (5, 0)], 4, 0), Some(1));
        assert_eq!(s.place("t", 4, 0, 0.0).unwrap().node_id, 1);
    }

    #[test]
    fn no_fit_leaves_map_unchanged() {
        let mut s = with_free(&[3, 3], 8);
        let before = s.clone();
        assert_eq!(s.place("t", 4, 0, 0.0), Err(SchedulerError::NoFit { cores: 4, gpus: 0 }));
        assert_eq!(s, before);
    }

    #[test]
    fn gpus_and_cores_must_fit_on_one_node() {
        let mut s = SlotMap::new([(4, 0), (4, 2)]);
        assert_eq!(s.place("g", 1, 1, 0.0).unwrap().node_id, 1);
        assert_eq!(s.place("g2", 4, 1, 0.0), Err(SchedulerError::NoFit { cores: 4, gpus: 1 }));
        let p = s.place("g3", 3, 1, 0.0).unwrap();
        assert_eq!(p.gpu_indices, vec![1]);
    }

    #[test]
    fn release_inverts_place() {
        let mut s = SlotMap::uniform(3, 4, 1);
        let before = s.clone();
        s.place("a", 3, 1, 1.0).unwrap();
        s.release("a").unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn release_unknown() {
        let mut s = SlotMap::uniform(1, 1, 0);
        assert_eq!(s.release("nope"), Err(SchedulerError::UnknownAllocation("nope".into())));
    }

    #[test]
    fn duplicate_uid_rejected() {
        let mut s = SlotMap::uniform(2, 2, 0);
        s.place("a", 1, 0, 0.0).unwrap();
        assert!(matches!(s.place("a", 1, 0, 0.0), Err(SchedulerError::DuplicateAllocation(_))));
    }

    #[test]
    fn indices_are_disjoint_on_a_node() {
        let mut s = SlotMap::uniform(1, 8, 0);
        let a = s.place("a", 3, 0, 0.0).unwrap();
        let b = s.place("b", 2, 0, 0.0).unwrap();
        s.release("a").unwrap();
        let c = s.place("c", 4, 0, 0.0).unwrap();
        for i in &c.core_indices {
            assert!(!b.core_indices.contains(i));
        }
        assert_eq!(a.core_indices, vec![0, 1, 2]);
    }

    fn unit(uid: &str, cores: u32) -> TaskDescription {
        TaskDescription::function(uid, "noop", Value::Null).with_cores(cores)
    }

    #[test]
    fn fifo_when_node_frees() {
        let mut sched = AgentScheduler::new(SlotMap::uniform(1, 56, 0));
        sched.slots_mut().place("busy", 56, 0, 0.0).unwrap();
        sched.enqueue(unit("A", 56));
        sched.enqueue(unit("B", 1));
        assert!(sched.schedule(0.0).is_empty());
        sched.release("busy").unwrap();
        let placed: Vec<_> = sched.schedule(1.0).into_iter().map(|(t, _)| t.uid).collect();
        assert_eq!(placed, vec!["A"]);
        assert_eq!(sched.queued(), 1);
    }

    /// Reference windowed FIFO: scan the first `window` tasks in order and
    /// take each one whose demand fits the remaining free cores of some node.
    fn oracle_windowed(free: &mut [u32], demands: &[u32], window: usize) -> Vec<usize> {
        let mut taken = Vec::new();
        for (i, &d) in demands.iter().enumerate().take(window) {
            if let Some(n) = free.iter().position(|&f| f >= d) {
                free[n] -= d;
                taken.push(i);
            }
        }
        taken
    }

    #[test]
    fn lookahead_lets_small_tasks_pass() {
        let mut sched = AgentScheduler::new(SlotMap::uniform(1, 56, 0));
        sched.slots_mut().place("busy", 55, 0, 0.0).unwrap();
        sched.enqueue(unit("A", 56));
        sched.enqueue(unit("B", 1));
        let placed: Vec<_> = sched.schedule(0.0).into_iter().map(|(t, _)| t.uid).collect();
        assert_eq!(oracle_windowed(&mut [1], &[56, 1], DEFAULT_LOOKAHEAD), vec![1]);
        assert_eq!(placed, vec!["B"]);
    }

    #[test]
    fn lookahead_one_is_strict_fifo() {
        let mut sched = AgentScheduler::new(SlotMap::uniform(1, 56, 0)).with_lookahead(1);
        sched.slots_mut().place("busy", 55, 0, 0.0).unwrap();
        sched.enqueue(unit("A", 56));
        sched.enqueue(unit("B", 1));
        assert!(sched.schedule(0.0).is_empty());
    }

    proptest! {
        #[test]
        fn windowed_fifo_matches_reference(
            demands in proptest::collection::vec(1u32..=8, 1..60),
            busy in proptest::collection::vec(0u32..=8, 1..6),
            window in 1usize..20,
        ) {
            let free_now: Vec<u32> = busy.iter().map(|b| 8 - b).collect();
            let slots = with_free(&free_now, 8);
            let mut free: Vec<u32> = busy.iter().map(|b| 8 - b).collect();
            let expect = oracle_windowed(&mut free, &demands, window);
            let mut sched = AgentScheduler::new(slots).with_lookahead(window);
            for (i, &d) in demands.iter().enumerate() {
                sched.enqueue(unit(&format!("t{i}"), d));
            }
            let got: Vec<usize> = sched.schedule(0.0).into_iter()
                .map(|(t, _)| t.uid[1..].parse().unwrap()).collect();
            // the real scheduler stops early once no cores are left, which
            // cannot change which tasks get placed
            prop_assert_eq!(got, expect);
        }

        #[test]
        fn random_place_release_conserves_capacity(ops in proptest::collection::vec((any::<bool>(), 1u32..=4, 0u32..=1, 0usize..16), 1..200)) {
            let mut s = SlotMap::uniform(4, 4, 1);
            let initial = s.clone();
            let mut live: Vec<String> = Vec::new();
            for (n, (place, cores, gpus, pick)) in ops.into_iter().enumerate() {
                if place || live.is_empty() {
                    let uid = format!("u{n}");
                    if s.place(&uid, cores, gpus, n as f64).is_ok() {
                        live.push(uid);
                    }
                } else {
                    let uid = live.remove(pick % live.len());
                    s.release(&uid).unwrap();
                }
                prop_assert!(s.check_consistency().is_ok());
                for i in 0..s.n_nodes() {
                    prop_assert!(s.free_cores(i) <= 4 && s.free_gpus(i) <= 1);
                }
            }
            for uid in live {
                s.release(&uid).unwrap();
            }
            prop_assert_eq!(s.clone().nodes, initial.nodes.clone());
            prop_assert_eq!(s.n_allocations(), 0);
        }
    }
}
