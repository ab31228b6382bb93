//! Reduced-order distributed observers for autonomous LTI plants.
//!
//! Each node of a directed network measures a block of the plant output and
//! runs a local observer of order `n − p_i`, exchanging estimates with its
//! neighbours. [`synthesis::synthesize`] builds and certifies the gains;
//! [`simulator::simulate`] integrates the coupled plant and observers.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod error_system;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod plant;
pub mod simulator;
pub mod synthesis;

pub use error::{Error, Result, Step};
pub use error_system::GlobalErrorSystem;
pub use graph::{Edge, NetworkGraph};
pub use plant::Plant;
pub use simulator::{SimulationConfig, SimulationTrace};
pub use synthesis::{NodeGains, ObserverRealization, Synthesis, SynthesisParameters};
