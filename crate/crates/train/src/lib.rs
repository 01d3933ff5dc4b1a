//! Training runtimes: the single-node data-parallel trainer, the
//! parameter-server variant (scheduler, primary, workers) and the dataset
//! plumbing they share. Every role talks to the others only through the
//! data server.

pub mod bundle;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod harness;
pub mod keys;
pub mod psv;
pub mod scheduler;
pub mod sn;

pub use error::{Result, TrainError};
