//! Voxel volumes, point sets, the anchor lattice and exact kNN.

mod knn;
mod lattice;
mod pointset;
mod volume;

pub use knn::{knn_indices, squared_distance, GridIndex, Neighbors};
pub use lattice::{anchor_grid, cell_centers, normalized, voxel_coords, Coords};
pub use pointset::{construct_points, construct_points_from, point_head, revert_points, PointSet};
pub use volume::Volume;
