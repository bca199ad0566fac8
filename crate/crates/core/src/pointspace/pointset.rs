use super::lattice::{voxel_coords, Coords};
use super::volume::Volume;
use crate::diffcore::{Tensor, Var};
use crate::error::{Error, Result};

/// `n` points with `d`-channel features and parallel coordinates.
///
/// Coordinates travel as metadata beside the features; linear layers never
/// touch them. When `grid` is set the points enumerate that lattice z-major.
#[derive(Clone, Debug)]
pub struct PointSet<'t> {
    pub features: Var<'t>,
    pub coords: Coords,
    pub grid: Option<[usize; 3]>,
}

impl<'t> PointSet<'t> {
    pub fn new(features: Var<'t>, coords: Coords, grid: Option<[usize; 3]>) -> Result<Self> {
        let n = features.dims().1;
        if coords.len() != n {
            return Err(Error::dim(
                "point_set",
                format!("{n} feature columns but {} coordinates", coords.len()),
            ));
        }
        if let Some(g) = grid {
            if g.iter().product::<usize>() != n {
                return Err(Error::dim(
                    "point_set",
                    format!("grid {g:?} does not hold {n} points"),
                ));
            }
        }
        Ok(PointSet {
            features,
            coords,
            grid,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Feature width `d`.
    pub fn width(&self) -> usize {
        self.features.dims().0
    }

    /// Same points and coordinates, new features.
    pub fn with_features(&self, features: Var<'t>) -> Result<Self> {
        Self::new(features, self.coords.clone(), self.grid)
    }
}

/// Coordinates as a constant `[3, n]` tensor.
fn coord_rows(coords: &Coords) -> Tensor {
    let n = coords.len();
    let mut data = vec![0.0; 3 * n];
    for (j, p) in coords.iter().enumerate() {
        for a in 0..3 {
            data[a * n + j] = p[a];
        }
    }
    Tensor::matrix(3, n, data).expect("nonempty coords")
}

/// Lifts one or more intensity channels (each `[1, n]` over the `shape`
/// lattice) to points: the raw per-point vector is the channels followed by
/// the normalized `(x, y, z)` coordinates, then linearly embedded.
pub fn construct_points_from<'t>(
    channels: &[Var<'t>],
    shape: [usize; 3],
    weight: Var<'t>,
    bias: Var<'t>,
) -> Result<PointSet<'t>> {
    let Some(first) = channels.first() else {
        return Err(Error::contract("point construction needs at least one channel"));
    };
    let tape = first.tape();
    let coords = voxel_coords(shape);
    let n = coords.len();
    for ch in channels {
        if ch.dims() != (1, n) {
            return Err(Error::dim(
                "construct_points",
                format!("channel {:?} for a {shape:?} lattice", ch.shape()),
            ));
        }
    }
    let raw_width = channels.len() + 3;
    if weight.dims().1 != raw_width {
        return Err(Error::dim(
            "construct_points",
            format!("embedding takes {} channels, raw points have {raw_width}", weight.dims().1),
        ));
    }
    let mut parts = channels.to_vec();
    parts.push(tape.constant(coord_rows(&coords)));
    let raw = tape.concat_rows(&parts)?;
    let features = raw.linear(weight, Some(bias))?;
    PointSet::new(features, coords, Some(shape))
}

/// Single-channel construction from a volume held fixed on the tape.
pub fn construct_points<'t>(
    volume: &Volume,
    weight: Var<'t>,
    bias: Var<'t>,
) -> Result<PointSet<'t>> {
    let tape = weight.tape();
    let intensity = tape.constant(volume.to_row());
    construct_points_from(&[intensity], volume.shape(), weight, bias)
}

/// Linear head mapping each point to one scalar, `[1, n]` in lattice order.
pub fn point_head<'t>(points: &PointSet<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    if points.grid.is_none() {
        return Err(Error::contract("points reversion needs a lattice (grid shape unset)"));
    }
    if weight.dims().0 != 1 {
        return Err(Error::dim(
            "revert_points",
            format!("head must produce one channel, weight is {:?}", weight.shape()),
        ));
    }
    points.features.linear(weight, Some(bias))
}

/// Writes head outputs back onto the originating lattice.
pub fn revert_points(points: &PointSet<'_>, weight: Var<'_>, bias: Var<'_>) -> Result<Volume> {
    let row = point_head(points, weight, bias)?;
    let grid = points.grid.expect("checked by point_head");
    Volume::from_row(grid, &row.value())
}
