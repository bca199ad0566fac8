use crate::datasim::{assemble_patches, extract_patches};
use crate::error::Result;
use crate::network::{generator_forward_batch, ModelParams};
use crate::pointspace::Volume;

/// Runs the generator over every `S^3` patch of `lpet` (in parallel) and
/// overlap-averages the outputs back into a full volume.
pub fn reconstruct_volume(lpet: &Volume, params: &ModelParams, stride: usize) -> Result<Volume> {
    let (grid, patches) = extract_patches(lpet, params.config.input_side, stride)?;
    let outputs = generator_forward_batch(&patches, params)?;
    assemble_patches(&grid, &outputs)
}
