use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::pointspace::Volume;

/// Counts per unit intensity at full dose.
pub const DEFAULT_COUNT_SCALE: f64 = 50.0;
/// Quarter of the standard count level.
pub const QUARTER_DOSE: f64 = 0.25;

/// Voxel-wise Poisson thinning: each voxel is drawn with mean
/// `dose * scale * v` and divided back by `dose * scale`, giving an unbiased
/// but noisier estimate of `v`.
pub fn simulate_low_dose(spet: &Volume, dose_fraction: f64, scale: f64, seed: u64) -> Result<Volume> {
    if !(dose_fraction > 0.0 && dose_fraction <= 1.0) {
        return Err(Error::contract(format!("dose fraction {dose_fraction} outside (0, 1]")));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::contract(format!("count scale {scale} must be positive")));
    }
    if let Some((i, v)) = spet.voxels().iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::contract(format!("voxel {i} has negative or non-finite intensity {v}")));
    }
    let gain = dose_fraction * scale;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut voxels = Vec::with_capacity(spet.len());
    for &v in spet.voxels() {
        let mean = gain * v;
        let counts = if mean == 0.0 {
            0.0
        } else {
            Poisson::new(mean)
                .map_err(|e| Error::contract(format!("poisson mean {mean}: {e}")))?
                .sample(&mut rng)
        };
        voxels.push(counts / gain);
    }
    Volume::new(spet.shape(), voxels)
}
