use crate::error::{Error, Result};
use crate::pointspace::Volume;

/// Cube patches of edge `side` placed every `stride` voxels along each axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub shape: [usize; 3],
    pub side: usize,
    pub stride: usize,
    /// Patch origins, x fastest.
    pub origins: Vec<[usize; 3]>,
}

/// Strides that divide `extent - side` on every axis.
fn admissible_strides(shape: [usize; 3], side: usize) -> Vec<usize> {
    let spans: Vec<usize> = shape.iter().map(|e| e - side).filter(|&s| s > 0).collect();
    let Some(&limit) = spans.iter().min() else {
        return vec![1];
    };
    (1..=limit.min(side)).filter(|s| spans.iter().all(|span| span % s == 0)).collect()
}

impl PatchGrid {
    pub fn new(shape: [usize; 3], side: usize, stride: usize) -> Result<Self> {
        if side == 0 || stride == 0 {
            return Err(Error::contract("patch side and stride must be positive"));
        }
        if shape.iter().any(|&e| e < side) {
            return Err(Error::contract(format!(
                "patch side {side} exceeds volume {shape:?}"
            )));
        }
        if stride > side && shape.iter().any(|&e| e > side) {
            return Err(Error::contract(format!(
                "stride {stride} exceeds patch side {side}; voxels between patches would be left uncovered"
            )));
        }
        if shape.iter().any(|&e| (e - side) % stride != 0) {
            let ok: Vec<String> = admissible_strides(shape, side).iter().map(usize::to_string).collect();
            return Err(Error::contract(format!(
                "stride {stride} does not tile {shape:?} with patch {side}; suggested strides: {}",
                ok.join(", ")
            )));
        }
        let counts = shape.map(|e| (e - side) / stride + 1);
        let mut origins = Vec::with_capacity(counts.iter().product());
        for z in 0..counts[2] {
            for y in 0..counts[1] {
                for x in 0..counts[0] {
                    origins.push([x * stride, y * stride, z * stride]);
                }
            }
        }
        Ok(PatchGrid {
            shape,
            side,
            stride,
            origins,
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Patches per axis.
    pub fn counts(&self) -> [usize; 3] {
        self.shape.map(|e| (e - self.side) / self.stride + 1)
    }
}

pub fn crop(volume: &Volume, origin: [usize; 3], side: usize) -> Result<Volume> {
    let [ox, oy, oz] = origin;
    Volume::from_fn([side; 3], |x, y, z| volume.get(ox + x, oy + y, oz + z))
}

pub fn extract_patches(volume: &Volume, side: usize, stride: usize) -> Result<(PatchGrid, Vec<Volume>)> {
    let grid = PatchGrid::new(volume.shape(), side, stride)?;
    let patches = grid
        .origins
        .iter()
        .map(|&o| crop(volume, o, side))
        .collect::<Result<Vec<_>>>()?;
    Ok((grid, patches))
}

/// Overlap-averaged recomposition. Each voxel is the running mean of its
/// covering patches in grid order, so identical contributions reproduce the
/// value exactly.
pub fn assemble_patches(grid: &PatchGrid, patches: &[Volume]) -> Result<Volume> {
    if patches.len() != grid.len() {
        return Err(Error::contract(format!(
            "{} patches for a grid of {}",
            patches.len(),
            grid.len()
        )));
    }
    let mut out = Volume::filled(grid.shape, 0.0)?;
    let mut hits = vec![0u32; out.len()];
    for (origin, patch) in grid.origins.iter().zip(patches) {
        if patch.shape() != [grid.side; 3] {
            return Err(Error::contract(format!(
                "patch of shape {:?} in a grid of side {}",
                patch.shape(),
                grid.side
            )));
        }
        for z in 0..grid.side {
            for y in 0..grid.side {
                for x in 0..grid.side {
                    let i = out.index(origin[0] + x, origin[1] + y, origin[2] + z);
                    hits[i] += 1;
                    let m = &mut out.voxels_mut()[i];
                    *m += (patch.get(x, y, z) - *m) / hits[i] as f64;
                }
            }
        }
    }
    Ok(out)
}
