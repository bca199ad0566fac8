//! Generator and discriminator assembled from points reducers, expanders and
//! context clustering.

mod blocks;
mod checkpoint;
mod config;
mod model;
mod params;

pub use blocks::{
    coc_block, points_expander, points_reducer, tcoc_block, ClusterShape, CocBlock, CocVars, FeedForward,
    FeedForwardVars, TcocBlock, TcocVars, OCTANTS,
};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{ModelConfig, STAGES};
pub use model::{
    discriminator_forward, generator_forward, generator_forward_batch, Discriminator, Generator, HeadInit,
    ModelParams, StageTrace,
};
pub use params::{Bound, Init, Linear, LinearVars, ParamId, ParamStore};
