//! Test fixtures and oracles shared by the airlift test suites.
//!
//! Nothing here depends on `airlift` itself: layer tars are written with the
//! `tar` crate directly and the extraction oracle works on a real scratch
//! directory, so the suites compare two independent implementations.

pub mod gen;
pub mod hostfs;
pub mod images;
pub mod layers;
pub mod oracle;
pub mod snapshot;
pub mod workload;

pub use layers::{gzip, layer_tar, TEntry};
pub use snapshot::{SnapEntry, SnapKind, Snapshot};
