use crate::backend::{BackendError, BatchAdapter, NodePool, PoolHandle, PoolStatus};
use crate::model::PilotDescription;

/// Partitions the host into virtual nodes. Pools become active immediately;
/// the sum of cores held by live pools never exceeds the host capacity.
#[derive(Debug)]
pub struct LocalAdapter {
    host_cores: u64,
    pools: Vec<(NodePool, PoolStatus)>,
    clock: fn() -> f64,
}

fn epoch_now() -> f64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl LocalAdapter {
    pub fn new(host_cores: u64) -> Self {
        LocalAdapter { host_cores, pools: Vec::new(), clock: epoch_now }
    }

    /// Capacity taken from the number of CPUs the OS reports.
    pub fn for_host() -> Self {
        let n = std::thread::available_parallelism().map(|n| n.get() as u64).unwrap_or(1);
        LocalAdapter::new(n)
    }

    pub fn host_cores(&self) -> u64 {
        self.host_cores
    }

    fn held_cores(&self) -> u64 {
        self.pools.iter().filter(|(_, s)| *s != PoolStatus::Done).map(|(p, _)| p.total_cores()).sum()
    }

    /// Submits and returns the active pool in one step.
    pub fn acquire(&mut self, p: &PilotDescription) -> Result<NodePool, BackendError> {
        let h = self.submit(p)?;
        Ok(self.pools[h.0].0.clone())
    }

    fn entry(&mut self, h: PoolHandle) -> Result<&mut (NodePool, PoolStatus), BackendError> {
        self.pools.get_mut(h.0).ok_or_else(|| BackendError::Adapter(format!("unknown pool handle {}", h.0)))
    }
}

impl BatchAdapter for LocalAdapter {
    fn submit(&mut self, p: &PilotDescription) -> Result<PoolHandle, BackendError> {
        p.validate()?;
        let requested = p.total_cores();
        let available = self.host_cores.saturating_sub(self.held_cores());
        if requested > available {
            return Err(BackendError::Capacity { requested, available, capacity: self.host_cores });
        }
        let pool = NodePool::from_description(p, (self.clock)());
        self.pools.push((pool, PoolStatus::Active));
        Ok(PoolHandle(self.pools.len() - 1))
    }

    fn poll(&mut self, h: PoolHandle) -> Result<PoolStatus, BackendError> {
        Ok(self.entry(h)?.1)
    }

    fn cancel(&mut self, h: PoolHandle) -> Result<(), BackendError> {
        self.entry(h)?.1 = PoolStatus::Done;
        Ok(())
    }

    fn pool(&self, h: PoolHandle) -> Option<&NodePool> {
        self.pools.get(h.0).map(|(p, _)| p)
    }
}
