//! Resource backends. A backend turns a [`PilotDescription`] into an active
//! [`NodePool`]: the local backend partitions the host into virtual nodes,
//! the simulated backend activates pools on a discrete-event clock.

mod local;
mod sim;

pub use local::LocalAdapter;
pub use sim::{SimAdapter, SimClock};

use thiserror::Error;

use crate::model::{PilotDescription, ValidationError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub node_id: usize,
    pub name: String,
    pub cores: u32,
    pub gpus: u32,
}

/// The nodes a pilot holds while it is active.
#[derive(Debug, Clone, PartialEq)]
pub struct NodePool {
    pub pilot_id: String,
    pub nodes: Vec<Node>,
    pub t_available: f64,
    pub t_deadline: f64,
}

impl NodePool {
    pub fn from_description(p: &PilotDescription, t_available: f64) -> NodePool {
        let nodes = (0..p.n_nodes)
            .map(|i| Node { node_id: i, name: node_name(&p.pilot_id, i), cores: p.cores_per_node, gpus: p.gpus_per_node })
            .collect();
        NodePool { pilot_id: p.pilot_id.clone(), nodes, t_available, t_deadline: t_available + p.walltime_s }
    }

    pub fn total_cores(&self) -> u64 {
        self.nodes.iter().map(|n| n.cores as u64).sum()
    }

    pub fn total_gpus(&self) -> u64 {
        self.nodes.iter().map(|n| n.gpus as u64).sum()
    }
}

pub fn node_name(pilot_id: &str, index: usize) -> String {
    format!("{pilot_id}.n{index:05}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolStatus {
    Pending,
    Active,
    Done,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("pilot needs {requested} cores but only {available} of {capacity} host cores are free")]
    Capacity { requested: u64, available: u64, capacity: u64 },
    #[error("invalid pilot description: {0}")]
    Invalid(#[from] ValidationError),
    #[error("adapter error: {0}")]
    Adapter(String),
}

/// Opaque handle for a submitted pilot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PoolHandle(pub usize);

/// Batch-system adapter interface. Status moves only forward through
/// Pending, Active, Done; a pool is never Done without having been Active
/// unless it was canceled while still Pending.
pub trait BatchAdapter {
    fn submit(&mut self, p: &PilotDescription) -> Result<PoolHandle, BackendError>;
    fn poll(&mut self, h: PoolHandle) -> Result<PoolStatus, BackendError>;
    fn cancel(&mut self, h: PoolHandle) -> Result<(), BackendError>;
    fn pool(&self, h: PoolHandle) -> Option<&NodePool>;
}

/// Largest number of pools whose `[t_available, t_end)` windows overlap.
pub fn peak_concurrency(windows: &[(f64, f64)]) -> usize {
    let mut edges: Vec<(f64, i32)> = Vec::with_capacity(windows.len() * 2);
    for &(a, b) in windows {
        edges.push((a, 1));
        edges.push((b, -1));
    }
    // ends sort before starts at equal times: half-open windows
    edges.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let mut cur = 0i32;
    let mut peak = 0i32;
    for (_, d) in edges {
        cur += d;
        peak = peak.max(cur);
    }
    peak as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Backend;

    #[test]
    fn pool_from_description() {
        let p = PilotDescription::new("p0", 3, 4, Backend::Sim);
        let pool = NodePool::from_description(&p, 5.0);
        assert_eq!(pool.total_cores(), 12);
        assert_eq!(pool.nodes[2].name, "p0.n00002");
        assert_eq!(pool.t_deadline, 5.0 + p.walltime_s);
    }

    #[test]
    fn peak_of_staggered_windows() {
        // brute force: sample the overlap count at every window start
        let windows: Vec<(f64, f64)> = (0..31).map(|i| (i as f64 * 10.0, i as f64 * 10.0 + 125.0)).collect();
        let brute = windows.iter().map(|&(s, _)| windows.iter().filter(|&&(a, b)| a <= s && s < b).count()).max().unwrap();
        assert_eq!(brute, 13);
        assert_eq!(peak_concurrency(&windows), 13);
    }

    #[test]
    fn touching_windows_do_not_overlap() {
        assert_eq!(peak_concurrency(&[(0.0, 1.0), (1.0, 2.0)]), 1);
    }
}
