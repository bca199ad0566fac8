//! Point coordinates and the even anchor lattice.

use std::ops::Index;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Per-point `[x, y, z]` coordinates, shared cheaply between point sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Coords(Arc<[[f64; 3]]>);

impl Coords {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Coords(points.into())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[[f64; 3]] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64; 3]> {
        self.0.iter()
    }

    /// Reorders points: output `j` is input `order[j]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Coords::new(order.iter().map(|&i| self.0[i]).collect())
    }
}

impl Index<usize> for Coords {
    type Output = [f64; 3];

    fn index(&self, i: usize) -> &[f64; 3] {
        &self.0[i]
    }
}

/// `index / (extent - 1)`, with single-extent axes mapping to 0.
#[inline]
pub fn normalized(index: usize, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        index as f64 / (extent - 1) as f64
    }
}

/// Normalized voxel coordinates of a full `[H, W, D]` lattice, z-major.
pub fn voxel_coords(shape: [usize; 3]) -> Coords {
    let mut pts = Vec::with_capacity(shape.iter().product());
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                pts.push([
                    normalized(x, shape[0]),
                    normalized(y, shape[1]),
                    normalized(z, shape[2]),
                ]);
            }
        }
    }
    Coords::new(pts)
}

/// Cell centers `(i + 0.5) / extent` of an even lattice over `[0, 1]^3`,
/// z-major.
pub fn cell_centers(extents: [usize; 3]) -> Coords {
    let mut pts = Vec::with_capacity(extents.iter().product());
    for z in 0..extents[2] {
        for y in 0..extents[1] {
            for x in 0..extents[0] {
                pts.push([
                    (x as f64 + 0.5) / extents[0] as f64,
                    (y as f64 + 0.5) / extents[1] as f64,
                    (z as f64 + 0.5) / extents[2] as f64,
                ]);
            }
        }
    }
    Coords::new(pts)
}

/// `per_axis^3` anchors at the cell centers of an even lattice. Depends only
/// on the point count, never on features.
pub fn anchor_grid(point_count: usize, per_axis: usize) -> Result<Coords> {
    if point_count == 0 {
        return Err(Error::contract("anchor_grid on an empty point set"));
    }
    if per_axis == 0 {
        return Err(Error::contract("anchor_grid needs at least one anchor per axis"));
    }
    let total = per_axis
        .checked_pow(3)
        .ok_or_else(|| Error::contract(format!("{per_axis}^3 anchors overflow")))?;
    if total > point_count {
        return Err(Error::contract(format!(
            "too many anchors: {per_axis}^3 = {total} exceeds {point_count} points"
        )));
    }
    Ok(cell_centers([per_axis; 3]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_anchor_is_center() {
        let a = anchor_grid(5, 1).unwrap();
        assert_eq!(a.as_slice(), &[[0.5, 0.5, 0.5]]);
    }

    #[test]
    fn two_per_axis() {
        let a = anchor_grid(8, 2).unwrap();
        assert_eq!(a.len(), 8);
        for p in a.iter() {
            for v in p {
                assert!(*v == 0.25 || *v == 0.75);
            }
        }
        assert_eq!(a[0], [0.25, 0.25, 0.25]);
        assert_eq!(a[1], [0.75, 0.25, 0.25]);
        assert_eq!(a[7], [0.75, 0.75, 0.75]);
    }

    #[test]
    fn eighthed_count_at_full_scale() {
        let n = 64usize.pow(3);
        let a = anchor_grid(n, 32).unwrap();
        assert_eq!(a.len(), 32768);
        assert_eq!(a.len() * 8, n);
    }

    #[test]
    fn too_many_anchors() {
        assert!(matches!(anchor_grid(7, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn degenerate_axes_map_to_zero() {
        let c = voxel_coords([1, 1, 1]);
        assert_eq!(c.as_slice(), &[[0.0, 0.0, 0.0]]);
        let c = voxel_coords([3, 1, 2]);
        assert_eq!(c[2], [1.0, 0.0, 0.0]);
        assert_eq!(c[3], [0.0, 0.0, 1.0]);
    }
}
