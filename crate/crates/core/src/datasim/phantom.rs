use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pointspace::Volume;

/// Parameters of a synthetic standard-dose phantom.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub seed: u64,
    pub ellipsoids: usize,
    /// Uniform range of per-ellipsoid intensities.
    pub intensity: (f64, f64),
    pub background: f64,
    /// Gaussian blur standard deviation in voxels; 0 disables blurring.
    pub blur_sigma: f64,
}

impl PhantomSpec {
    pub fn cube(side: usize, seed: u64) -> Self {
        PhantomSpec {
            shape: [side; 3],
            seed,
            ellipsoids: 6,
            intensity: (0.5, 2.0),
            background: 0.2,
            blur_sigma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&e| e < 8) {
            return Err(Error::contract(format!(
                "phantom extents must be >= 8, got {:?}",
                self.shape
            )));
        }
        let (lo, hi) = self.intensity;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::contract(format!("intensity range ({lo}, {hi}) must be nonnegative and ordered")));
        }
        if !(self.background >= 0.0 && self.background.is_finite()) {
            return Err(Error::contract("background level must be nonnegative"));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::contract("blur width must be nonnegative"));
        }
        Ok(())
    }
}

/// Axis-aligned ellipsoid in voxel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub intensity: f64,
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Inclusive voxel bounding box, `(lo, hi)` per axis.
    pub fn bounding_box(&self, shape: [usize; 3]) -> [(usize, usize); 3] {
        [0, 1, 2].map(|a| {
            let lo = (self.center[a] - self.radii[a]).floor().max(0.0) as usize;
            let hi = ((self.center[a] + self.radii[a]).ceil() as usize).min(shape[a] - 1);
            (lo, hi)
        })
    }
}

/// The ellipsoids `gen_phantom` draws for `spec`, in drawing order.
pub fn phantom_ellipsoids(spec: &PhantomSpec) -> Vec<Ellipsoid> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.intensity;
    (0..spec.ellipsoids)
        .map(|_| {
            let center = spec.shape.map(|e| rng.random_range(0.3..0.7) * (e - 1) as f64);
            let radii = spec.shape.map(|e| rng.random_range(0.08..0.25) * e as f64);
            let intensity = if hi > lo { rng.random_range(lo..hi) } else { lo };
            Ellipsoid {
                center,
                radii,
                intensity,
            }
        })
        .collect()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Separable convolution with edge clamping.
pub fn gaussian_blur(volume: &Volume, sigma: f64) -> Volume {
    if sigma == 0.0 {
        return volume.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let shape = volume.shape();
    let mut data = volume.voxels().to_vec();
    for axis in 0..3 {
        let extent = shape[axis] as isize;
        let src = Volume::new(shape, data.clone()).expect("same shape");
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    let p = [x, y, z];
                    let mut acc = 0.0;
                    for (t, w) in kernel.iter().enumerate() {
                        let mut q = p;
                        q[axis] = (p[axis] as isize + t as isize - r).clamp(0, extent - 1) as usize;
                        acc += w * src.get(q[0], q[1], q[2]);
                    }
                    data[volume.index(x, y, z)] = acc;
                }
            }
        }
    }
    Volume::new(shape, data).expect("same shape")
}

/// Background plus blurred ellipsoidal structures. Deterministic per seed and
/// nonnegative everywhere.
pub fn gen_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let shapes = phantom_ellipsoids(spec);
    let structure = Volume::from_fn(spec.shape, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        shapes.iter().filter(|e| e.contains(p)).map(|e| e.intensity).sum()
    })?;
    let blurred = gaussian_blur(&structure, spec.blur_sigma);
    let voxels = blurred.voxels().iter().map(|v| spec.background + v).collect();
    Volume::new(spec.shape, voxels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_phantom_is_background() {
        let mut s = PhantomSpec::cube(8, 3);
        s.ellipsoids = 0;
        let v = gen_phantom(&s).unwrap();
        assert!(v.voxels().iter().all(|&x| x == s.background));
    }

    #[test]
    fn deterministic_and_nonnegative() {
        let s = PhantomSpec::cube(12, 9);
        let a = gen_phantom(&s).unwrap();
        assert_eq!(a, gen_phantom(&s).unwrap());
        assert!(a.min() >= 0.0);
        let mut t = s.clone();
        t.seed = 10;
        assert_ne!(a, gen_phantom(&t).unwrap());
    }

    #[test]
    fn maximum_inside_single_ellipsoid() {
        let mut s = PhantomSpec::cube(16, 1);
        s.ellipsoids = 1;
        let v = gen_phantom(&s).unwrap();
        let e = phantom_ellipsoids(&s)[0];
        let bb = e.bounding_box(s.shape);
        let i = v.voxels().iter().enumerate().fold(0, |b, (i, x)| if *x > v.voxels()[b] { i } else { b });
        let (x, y, z) = (i % 16, (i / 16) % 16, i / 256);
        for (a, c) in [x, y, z].into_iter().enumerate() {
            assert!(bb[a].0 <= c && c <= bb[a].1);
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let v = Volume::filled([8, 8, 8], 0.5).unwrap();
        let b = gaussian_blur(&v, 1.3);
        assert!(b.voxels().iter().all(|x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn rejects_tiny_shape() {
        assert!(gen_phantom(&PhantomSpec::cube(4, 1)).is_err());
    }
}
