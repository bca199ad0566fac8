//! Context clustering over point sets.
//!
//! Centers are proposed on an even coordinate lattice, every point joins the
//! center it is most cosine-similar to, each cluster is summarised by a
//! similarity-weighted mean anchored at its center, and that summary is
//! dispatched back to the members with the same weights:
//!
//! ```text
//! w_m = sig(alpha * s_m + beta)
//! g   = (v_c + sum_m w_m v_m) / (1 + sum_m w_m)
//! v'_m = v_m + w_m g
//! ```
//!
//! The argmax assignment is a routing decision and carries no gradient; the
//! similarities `s_m` themselves stay differentiable.

mod routing;

pub use routing::Routing;

use crate::diffcore::{cosine_matrix_values, Tensor, Var};
use crate::error::{Error, Result};
use crate::pointspace::{anchor_grid, knn_indices, Coords, PointSet};

/// Learnable scale and shift applied to similarities before the sigmoid.
#[derive(Clone, Copy, Debug)]
pub struct ClusterParams<'t> {
    pub alpha: Var<'t>,
    pub beta: Var<'t>,
}

impl<'t> ClusterParams<'t> {
    /// `sig(alpha * s + beta)`.
    pub fn weights(&self, similarity: Var<'t>) -> Result<Var<'t>> {
        similarity.mul(self.alpha)?.add(self.beta)?.sigmoid()
    }
}

/// Partition of a point set around its proposed centers.
#[derive(Clone, Debug)]
pub struct ClusterAssignment<'t> {
    /// `[d, c]`.
    pub center_features: Var<'t>,
    /// Cluster id of every point.
    pub member_of: Vec<usize>,
    /// `[1, n]`: similarity of each point to its own center.
    pub similarity: Var<'t>,
}

impl ClusterAssignment<'_> {
    pub fn clusters(&self) -> usize {
        self.center_features.dims().1
    }

    /// Point indices of cluster `j`, ascending.
    pub fn members(&self, j: usize) -> Vec<usize> {
        self.member_of
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == j)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Locations of the proposed centers: a `c_per_axis^3` even lattice when the
/// set holds at least that many points, otherwise one center per point.
pub fn center_positions(points: &PointSet<'_>, c_per_axis: usize) -> Result<Coords> {
    let n = points.len();
    if n == 0 {
        return Err(Error::contract("cannot propose centers for an empty point set"));
    }
    if c_per_axis == 0 {
        return Err(Error::contract("need at least one center per axis"));
    }
    match c_per_axis.checked_pow(3) {
        Some(c) if c <= n => anchor_grid(n, c_per_axis),
        _ => Ok(points.coords.clone()),
    }
}

/// `[d, c]` center features: each the mean feature of the `k_center` points
/// nearest to its lattice location (clamped to the point count).
pub fn propose_centers<'t>(
    points: &PointSet<'t>,
    c_per_axis: usize,
    k_center: usize,
) -> Result<Var<'t>> {
    let positions = center_positions(points, c_per_axis)?;
    let k = k_center.clamp(1, points.len());
    let neighbors = knn_indices(&points.coords, &positions, k)?;
    let gathered = points.features.gather_cols(neighbors.as_flat().to_vec())?;
    let groups: Vec<usize> = (0..positions.len() * k).map(|i| i / k).collect();
    gathered
        .scatter_add_cols(groups, positions.len())?
        .scale(1.0 / k as f64)
}

/// Cluster id per point: the most cosine-similar center, ties to the lowest
/// center index.
pub fn argmax_assignment(features: &Tensor, centers: &Tensor) -> Result<Vec<usize>> {
    let sims = cosine_matrix_values(features, centers)?;
    let (c, n) = sims.dims();
    let data = sims.data();
    let mut best = vec![0usize; n];
    let mut best_val = data[..n].to_vec();
    for j in 1..c {
        let row = &data[j * n..(j + 1) * n];
        for m in 0..n {
            if row[m] > best_val[m] {
                best_val[m] = row[m];
                best[m] = j;
            }
        }
    }
    Ok(best)
}

pub fn assign_clusters<'t>(points: &PointSet<'t>, centers: Var<'t>) -> Result<ClusterAssignment<'t>> {
    let member_of = argmax_assignment(&points.features.value(), &centers.value())?;
    assignment_from(points, centers, member_of)
}

fn assignment_from<'t>(
    points: &PointSet<'t>,
    centers: Var<'t>,
    member_of: Vec<usize>,
) -> Result<ClusterAssignment<'t>> {
    if member_of.len() != points.len() {
        return Err(Error::contract(format!(
            "{} routing entries for {} points",
            member_of.len(),
            points.len()
        )));
    }
    let own = centers.gather_cols(member_of.clone())?;
    let similarity = points.features.cosine_pairs(own)?;
    Ok(ClusterAssignment {
        center_features: centers,
        member_of,
        similarity,
    })
}

/// Members of one cluster with their similarities to its center.
#[derive(Clone, Copy, Debug)]
pub struct ClusterMembers<'t> {
    /// `[d, M]`.
    pub features: Var<'t>,
    /// `[1, M]`.
    pub similarity: Var<'t>,
}

/// Similarity-weighted aggregate `[d, 1]` of one cluster; an empty cluster
/// aggregates to its center.
pub fn aggregate_cluster<'t>(
    members: Option<ClusterMembers<'t>>,
    center: Var<'t>,
    params: ClusterParams<'t>,
) -> Result<Var<'t>> {
    let Some(members) = members else {
        return Ok(center);
    };
    check_members(&members, center)?;
    let w = params.weights(members.similarity)?;
    let num = center.add(members.features.mul(w)?.sum_cols()?)?;
    let den = w.sum()?.shift(1.0)?;
    num.div(den)
}

/// `v'_m = v_m + sig(alpha s_m + beta) g` for every member.
pub fn dispatch_cluster<'t>(
    members: ClusterMembers<'t>,
    aggregated: Var<'t>,
    params: ClusterParams<'t>,
) -> Result<Var<'t>> {
    check_members(&members, aggregated)?;
    let w = params.weights(members.similarity)?;
    members.features.add(aggregated.mul(w)?)
}

fn check_members(members: &ClusterMembers<'_>, center: Var<'_>) -> Result<()> {
    let (d, m) = members.features.dims();
    if members.similarity.dims() != (1, m) || center.dims() != (d, 1) {
        return Err(Error::dim(
            "cluster",
            format!(
                "members {:?}, similarity {:?}, center {:?}",
                members.features.shape(),
                members.similarity.shape(),
                center.shape()
            ),
        ));
    }
    Ok(())
}

/// Propose, assign, aggregate and dispatch in one pass. Point count, width,
/// coordinates and lattice are preserved.
pub fn context_cluster_layer<'t>(
    points: &PointSet<'t>,
    params: ClusterParams<'t>,
    c_per_axis: usize,
    k_center: usize,
    routing: &Routing,
) -> Result<PointSet<'t>> {
    let centers = propose_centers(points, c_per_axis, k_center)?;
    let member_of = routing.route(|| argmax_assignment(&points.features.value(), &centers.value()))?;
    let assignment = assignment_from(points, centers, member_of)?;
    let c = assignment.clusters();
    let members: std::sync::Arc<[usize]> = assignment.member_of.clone().into();

    let w = params.weights(assignment.similarity)?;
    let weighted = points.features.mul(w)?;
    let num = centers.add(weighted.scatter_add_cols(members.clone(), c)?)?;
    let den = w.scatter_add_cols(members.clone(), c)?.shift(1.0)?;
    let aggregated = num.div(den)?;
    let out = points
        .features
        .add(aggregated.gather_cols(members)?.mul(w)?)?;
    points.with_features(out)
}
