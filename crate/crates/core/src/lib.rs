//! Pilot-based coordinator/worker execution of many small tasks.
//!
//! A pilot holds a block of nodes. Inside it, coordinators own the workload
//! and hand tasks in bulk to single-node workers, which pull work by
//! advertising free slots. The same control logic runs against real
//! processes on the local host or inside a deterministic discrete-event
//! simulator, and every run leaves an event log from which utilization,
//! rates and startup costs are computed.

pub mod backend;
pub mod coordinator;
pub mod events;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod par;
pub mod protocol;
pub mod scheduler;
pub mod sim;
pub mod worker;
pub mod workload;
