use crate::error::{Error, Result};

/// Number of CoC blocks in each stack (and of mirrored TCoC blocks).
pub const STAGES: usize = 4;

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Patch edge length `S`; the generator maps `S^3` volumes.
    pub input_side: usize,
    /// Width `W0` of the embedded construction points.
    pub base_width: usize,
    /// Anchors per axis for each CoC block.
    pub anchors: [usize; STAGES],
    /// Neighbors gathered by reducers and by center proposal.
    pub k: usize,
    /// Total clusters per clustering layer; must be a cube.
    pub clusters: usize,
}

impl ModelConfig {
    /// `S = 64`, `W0 = 16`, anchors 32/16/8/4.
    pub fn full_scale() -> Self {
        Self::for_side(64, 16)
    }

    /// `S = 16`, `W0 = 8`, anchors 8/4/2/1.
    pub fn desk() -> Self {
        Self::for_side(16, 8)
    }

    /// Default schedule `S/2, S/4, S/8, S/16` with `k = c = 8`.
    pub fn for_side(side: usize, base_width: usize) -> Self {
        ModelConfig {
            input_side: side,
            base_width,
            anchors: [side / 2, side / 4, side / 8, side / 16],
            k: 8,
            clusters: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.input_side;
        if s < 16 || s % 16 != 0 {
            return Err(Error::contract(format!(
                "input side must be a positive multiple of 16, got {s}"
            )));
        }
        if self.base_width == 0 {
            return Err(Error::contract("base width must be positive"));
        }
        let mut expected = s;
        for (i, &a) in self.anchors.iter().enumerate() {
            expected /= 2;
            if a != expected {
                return Err(Error::contract(format!(
                    "anchor schedule {:?} must halve from S/2 = {} (block {} has {a}, expected {expected})",
                    self.anchors,
                    s / 2,
                    i + 1
                )));
            }
        }
        // The last reducer sees 8 points.
        if self.k == 0 || self.k > 8 {
            return Err(Error::contract(format!("k must be in 1..=8, got {}", self.k)));
        }
        self.centers_per_axis()?;
        Ok(())
    }

    /// Cube root of `clusters`.
    pub fn centers_per_axis(&self) -> Result<usize> {
        let c = self.clusters;
        let root = (1..=c).find(|r| r * r * r >= c).unwrap_or(0);
        if c == 0 || root * root * root != c {
            return Err(Error::contract(format!(
                "cluster count {c} is not a cube; centers are proposed on an even lattice"
            )));
        }
        Ok(root)
    }

    /// Point count entering the generator: `S^3`.
    pub fn points(&self) -> usize {
        self.input_side.pow(3)
    }

    /// Feature width after CoC block `i` (1-based), `W0 * 2^i`.
    pub fn width_after(&self, block: usize) -> usize {
        self.base_width << block
    }

    /// `(points, width)` after every stage of the generator: embedding, four
    /// CoC blocks and four TCoC blocks.
    pub fn stage_shapes(&self) -> Vec<(usize, usize)> {
        let mut out = vec![(self.points(), self.base_width)];
        for (i, a) in self.anchors.iter().enumerate() {
            out.push((a.pow(3), self.width_after(i + 1)));
        }
        for i in (0..STAGES).rev() {
            let points = if i == 0 { self.points() } else { self.anchors[i - 1].pow(3) };
            out.push((points, self.width_after(i)));
        }
        out
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}
