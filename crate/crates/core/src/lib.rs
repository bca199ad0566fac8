//! Point-based context-clusters generator and discriminator for reconstructing
//! standard-dose emission volumes from low-dose inputs.
//!
//! Volumes are lifted to point sets (intensity plus normalized lattice
//! coordinates), pushed through a hierarchy of point reducers and expanders
//! with context clustering at every level, and written back to the voxel
//! lattice. Everything is differentiated by the small tape in [`diffcore`].

pub mod contextcluster;
pub mod datasim;
pub mod diffcore;
pub mod error;
pub mod metrics;
pub mod network;
pub mod par;
pub mod pointspace;
pub mod selftest;
pub mod training;

pub use error::{Error, Result};
