//! Malleable task farming.
//!
//! A fault-tolerant farm server hands out task chunks to clients that may
//! attach or vanish at any moment, a pool-based evolutionary search over
//! Lennard-Jones clusters serves as the farmed computation, and a
//! discrete-event batch-cluster simulator with fill-in supply policies shows
//! how such preemptible clients fill the gaps a normal scheduler leaves.

pub mod chart;
pub mod client;
pub mod ea;
pub mod protocol;
pub mod server;
pub mod sim;
pub mod supervisor;
pub mod workload;
