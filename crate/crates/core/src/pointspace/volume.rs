use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Raw 3D scalar field.
///
/// Voxels are stored z-major: `x` (the `H` axis) varies fastest, `z` (the `D`
/// axis) slowest, i.e. index `(z * W + y) * H + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    voxels: Vec<f64>,
}

impl Volume {
    pub fn new(shape: [usize; 3], voxels: Vec<f64>) -> Result<Self> {
        let n = checked_count(shape)?;
        if voxels.len() != n {
            return Err(Error::dim(
                "volume",
                format!("shape {shape:?} needs {n} voxels, got {}", voxels.len()),
            ));
        }
        Ok(Volume { shape, voxels })
    }

    pub fn filled(shape: [usize; 3], value: f64) -> Result<Self> {
        let n = checked_count(shape)?;
        Ok(Volume {
            shape,
            voxels: vec![value; n],
        })
    }

    pub fn cube(side: usize, voxels: Vec<f64>) -> Result<Self> {
        Self::new([side; 3], voxels)
    }

    /// Builds a volume from `f(x, y, z)`.
    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let n = checked_count(shape)?;
        let mut voxels = Vec::with_capacity(n);
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Ok(Volume { shape, voxels })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f64] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f64> {
        self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.index(x, y, z)]
    }

    pub fn max(&self) -> f64 {
        self.voxels.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.voxels.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_finite(&self) -> bool {
        self.voxels.iter().all(|v| v.is_finite())
    }

    /// Voxels as a `[1, n]` row.
    pub fn to_row(&self) -> Tensor {
        Tensor::matrix(1, self.voxels.len(), self.voxels.clone()).expect("nonempty volume")
    }

    pub fn from_row(shape: [usize; 3], row: &Tensor) -> Result<Self> {
        if row.rows() != 1 {
            return Err(Error::dim("volume", format!("expected one row, got {:?}", row.shape())));
        }
        Self::new(shape, row.data().to_vec())
    }

    pub fn same_shape(&self, other: &Volume, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }
}

fn checked_count(shape: [usize; 3]) -> Result<usize> {
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::dim("volume", format!("zero extent in {shape:?}")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::dim("volume", format!("shape {shape:?} overflows")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn z_major_indexing() {
        let v = Volume::from_fn([2, 3, 4], |x, y, z| (100 * z + 10 * y + x) as f64).unwrap();
        assert_eq!(v.voxels()[1], 1.0);
        assert_eq!(v.voxels()[2], 10.0);
        assert_eq!(v.voxels()[6], 100.0);
        assert_eq!(v.get(1, 2, 3), 321.0);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Volume::new([2, 2, 2], vec![0.0; 7]).is_err());
        assert!(Volume::filled([0, 2, 2], 0.0).is_err());
    }
}
