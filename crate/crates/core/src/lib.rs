//! Daemon-free container deployment for air-gapped HPC systems.
//!
//! The crate covers the whole path from an exported container image to a
//! running, MPI-launchable process:
//!
//! * [`image`] parses OCI image layouts and `docker save` tarballs and
//!   squashes their layers into a single [`image::FlattenedRootfs`].
//! * [`archive`] packs a flattened tree into a single-directory `.tar.gz`
//!   and unpacks it safely onto node-local storage.
//! * [`runtime`] runs a command inside an unpacked tree using unprivileged
//!   user and mount namespaces with an identity UID/GID map.
//! * [`launcher`] renders single-node, `mpirun` and Slurm launch text.
//! * [`bench`] computes scaling efficiency and container overhead, and
//!   drives native-vs-contained measurement pairs.
//!
//! Interchangeable pieces (image input formats, launch emitters, report
//! formats) sit behind traits and are looked up by name in a [`Registry`].

pub mod archive;
pub mod bench;
pub mod image;
pub mod launcher;
mod registry;
pub mod runtime;

pub use registry::{Named, Registry};
