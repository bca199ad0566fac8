//! Point reducer / expander and the CoC / TCoC blocks built on them.

use rand_chacha::ChaCha8Rng;

use super::params::{Bound, Init, Linear, LinearVars, ParamId, ParamStore};
use crate::contextcluster::{context_cluster_layer, ClusterParams, Routing};
use crate::diffcore::{Tensor, Var};
use crate::error::{Error, Result};
use crate::pointspace::{anchor_grid, cell_centers, knn_indices, PointSet};

/// Children spawned per point by the expander: one per octant.
pub const OCTANTS: usize = 8;

/// Gathers the `k` nearest points of every anchor on a `per_axis^3` lattice,
/// concatenates them along channels and fuses them with `proj`.
pub fn points_reducer<'t>(
    points: &PointSet<'t>,
    per_axis: usize,
    k: usize,
    proj: LinearVars<'t>,
) -> Result<PointSet<'t>> {
    let anchors = anchor_grid(points.len(), per_axis)?;
    let neighbors = knn_indices(&points.coords, &anchors, k)?;
    let d = points.width();
    if proj.weight.dims().1 != k * d {
        return Err(Error::dim(
            "points_reducer",
            format!("projection takes {} channels, {k} neighbors of width {d} give {}", proj.weight.dims().1, k * d),
        ));
    }
    let slots = (0..k)
        .map(|s| points.features.gather_cols(neighbors.slot(s)))
        .collect::<Result<Vec<_>>>()?;
    let tape = points.features.tape();
    let fused = proj.apply(tape.concat_rows(&slots)?)?;
    PointSet::new(fused, anchors, Some([per_axis; 3]))
}

/// Column permutation that places child `j` of parent `p` (stored at column
/// `j * n + p`) at its z-major position on the doubled lattice.
fn octant_order(parent: [usize; 3]) -> Vec<usize> {
    let n: usize = parent.iter().product();
    let child = parent.map(|e| 2 * e);
    let mut order = Vec::with_capacity(n * OCTANTS);
    for z in 0..child[2] {
        for y in 0..child[1] {
            for x in 0..child[0] {
                let p = ((z / 2) * parent[1] + y / 2) * parent[0] + x / 2;
                let j = (x % 2) + 2 * (y % 2) + 4 * (z % 2);
                order.push(j * n + p);
            }
        }
    }
    order
}

/// Projects every point to `k * d_out` channels and splits the result into
/// `k = 8` children placed at the octant centers of the parent's lattice cell.
pub fn points_expander<'t>(
    points: &PointSet<'t>,
    k: usize,
    proj: LinearVars<'t>,
) -> Result<PointSet<'t>> {
    if k != OCTANTS {
        return Err(Error::contract(format!(
            "points expander places children on octants, k must be {OCTANTS} (got {k})"
        )));
    }
    let grid = match (points.grid, points.len()) {
        (Some(g), _) => g,
        (None, 1) => [1, 1, 1],
        (None, n) => {
            return Err(Error::contract(format!(
                "points expander needs a lattice; {n} unstructured points"
            )))
        }
    };
    let projected = proj.apply(points.features)?;
    let rows = projected.dims().0;
    if rows % k != 0 {
        return Err(Error::dim(
            "points_expander",
            format!("{rows} projected channels do not split into {k} children"),
        ));
    }
    let d_out = rows / k;
    let children = (0..k)
        .map(|j| projected.slice_rows(j * d_out, d_out))
        .collect::<Result<Vec<_>>>()?;
    let tape = points.features.tape();
    let stacked = tape.concat_cols(&children)?;
    let features = stacked.gather_cols(octant_order(grid))?;
    let child = grid.map(|e| 2 * e);
    PointSet::new(features, cell_centers(child), Some(child))
}

/// `x + fc2(silu(fc1(x)))`, applied pointwise.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardVars<'t> {
    pub fc1: LinearVars<'t>,
    pub fc2: LinearVars<'t>,
}

impl FeedForward {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize) -> Self {
        FeedForward {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), width, width, Init::Uniform),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), width, width, Init::Uniform),
        }
    }

    fn bind<'t>(&self, b: &Bound<'t>) -> FeedForwardVars<'t> {
        FeedForwardVars {
            fc1: self.fc1.bind(b),
            fc2: self.fc2.bind(b),
        }
    }
}

impl<'t> FeedForwardVars<'t> {
    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.apply(x)?;
        let gated = h.mul(h.sigmoid()?)?;
        x.add(self.fc2.apply(gated)?)
    }
}

/// Clustering hyperparameters shared by every block of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClusterShape {
    pub k: usize,
    pub centers_per_axis: usize,
}

fn cluster_scalars(store: &mut ParamStore, name: &str) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.alpha"), Tensor::scalar(1.0)),
        store.add(format!("{name}.beta"), Tensor::scalar(0.0)),
    )
}

/// Reduces the point count by `(n / anchors)` and doubles the width.
#[derive(Clone, Copy, Debug)]
pub struct CocBlock {
    pub anchors_per_axis: usize,
    pub reducer: Linear,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub ffn: FeedForward,
}

#[derive(Clone, Copy, Debug)]
pub struct CocVars<'t> {
    pub anchors_per_axis: usize,
    pub reducer: LinearVars<'t>,
    pub cluster: ClusterParams<'t>,
    pub ffn: FeedForwardVars<'t>,
}

impl CocBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width_in: usize,
        anchors_per_axis: usize,
        k: usize,
    ) -> Self {
        let width_out = 2 * width_in;
        let reducer = Linear::new(store, rng, &format!("{name}.reducer"), k * width_in, width_out, Init::Uniform);
        let (alpha, beta) = cluster_scalars(store, name);
        let ffn = FeedForward::new(store, rng, &format!("{name}.ffn"), width_out);
        CocBlock {
            anchors_per_axis,
            reducer,
            alpha,
            beta,
            ffn,
        }
    }

    pub fn bind<'t>(&self, b: &Bound<'t>) -> CocVars<'t> {
        CocVars {
            anchors_per_axis: self.anchors_per_axis,
            reducer: self.reducer.bind(b),
            cluster: ClusterParams {
                alpha: b.var(self.alpha),
                beta: b.var(self.beta),
            },
            ffn: self.ffn.bind(b),
        }
    }
}

/// Reducer, context clustering, then the residual feed-forward.
pub fn coc_block<'t>(
    points: &PointSet<'t>,
    block: &CocVars<'t>,
    shape: ClusterShape,
    routing: &Routing,
) -> Result<PointSet<'t>> {
    let reduced = points_reducer(points, block.anchors_per_axis, shape.k, block.reducer)?;
    let clustered = context_cluster_layer(&reduced, block.cluster, shape.centers_per_axis, shape.k, routing)?;
    clustered.with_features(block.ffn.apply(clustered.features)?)
}

/// Multiplies the point count by 8 and halves the width.
#[derive(Clone, Copy, Debug)]
pub struct TcocBlock {
    pub expander: Linear,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub ffn: FeedForward,
}

#[derive(Clone, Copy, Debug)]
pub struct TcocVars<'t> {
    pub expander: LinearVars<'t>,
    pub cluster: ClusterParams<'t>,
    pub ffn: FeedForwardVars<'t>,
}

impl TcocBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width_in: usize) -> Self {
        let width_out = width_in / 2;
        let expander = Linear::new(
            store,
            rng,
            &format!("{name}.expander"),
            width_in,
            OCTANTS * width_out,
            Init::Uniform,
        );
        let (alpha, beta) = cluster_scalars(store, name);
        let ffn = FeedForward::new(store, rng, &format!("{name}.ffn"), width_out);
        TcocBlock {
            expander,
            alpha,
            beta,
            ffn,
        }
    }

    pub fn bind<'t>(&self, b: &Bound<'t>) -> TcocVars<'t> {
        TcocVars {
            expander: self.expander.bind(b),
            cluster: ClusterParams {
                alpha: b.var(self.alpha),
                beta: b.var(self.beta),
            },
            ffn: self.ffn.bind(b),
        }
    }
}

/// Expander, context clustering, feed-forward, then the skip features of the
/// mirrored CoC stage are added. Coordinates come from the expander lattice.
pub fn tcoc_block<'t>(
    points: &PointSet<'t>,
    skip: &PointSet<'t>,
    block: &TcocVars<'t>,
    shape: ClusterShape,
    routing: &Routing,
) -> Result<PointSet<'t>> {
    let expanded = points_expander(points, OCTANTS, block.expander)?;
    let clustered = context_cluster_layer(&expanded, block.cluster, shape.centers_per_axis, shape.k, routing)?;
    let mixed = block.ffn.apply(clustered.features)?;
    if skip.features.dims() != mixed.dims() {
        return Err(Error::contract(format!(
            "skip connection {:?} does not match block output {:?}",
            skip.features.shape(),
            mixed.shape()
        )));
    }
    clustered.with_features(mixed.add(skip.features)?)
}
