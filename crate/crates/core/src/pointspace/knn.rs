//! Exact k-nearest-neighbor search over a uniform grid hash.
//!
//! Points are bucketed into a `g^3` grid over the unit cube. A query visits
//! Chebyshev shells of cells around its own cell and stops once the k-th best
//! distance is strictly inside the distance to the unvisited region. Ties are
//! resolved by ascending point index, so results match an exhaustive sort.

use super::lattice::Coords;
use crate::error::{Error, Result};
use crate::par;

/// Extra clearance required before a shell search may stop, so that points
/// rounded into a neighbouring cell are never skipped.
const STOP_MARGIN: f64 = 1e-9;

/// `q x k` neighbor table, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighbors {
    k: usize,
    indices: Vec<usize>,
}

impl Neighbors {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn queries(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, query: usize) -> &[usize] {
        &self.indices[query * self.k..(query + 1) * self.k]
    }

    /// The `slot`-th nearest point of every query.
    pub fn slot(&self, slot: usize) -> Vec<usize> {
        self.indices.iter().skip(slot).step_by(self.k).copied().collect()
    }

    pub fn as_flat(&self) -> &[usize] {
        &self.indices
    }
}

#[inline]
pub fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Bucketed point index.
pub struct GridIndex<'a> {
    points: &'a [[f64; 3]],
    cells: usize,
    /// `start[c]..start[c + 1]` indexes `order` for cell `c`.
    start: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> GridIndex<'a> {
    pub fn build(coords: &'a Coords) -> Self {
        let points = coords.as_slice();
        let n = points.len();
        let cells = ((n as f64 / 2.0).cbrt().ceil() as usize).clamp(1, 128);
        let mut counts = vec![0usize; cells * cells * cells + 1];
        let keys: Vec<usize> = points.iter().map(|p| cell_key(p, cells)).collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let start = counts.clone();
        let mut fill = counts;
        let mut order = vec![0; n];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        GridIndex {
            points,
            cells,
            start,
            order,
        }
    }

    /// Indices of the `k` nearest points to `query`, nearest first.
    pub fn nearest(&self, query: &[f64; 3], k: usize) -> Vec<usize> {
        let g = self.cells as isize;
        let qc = [0, 1, 2].map(|a| axis_cell(query[a], self.cells) as isize);
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let h = 1.0 / self.cells as f64;
        for r in 0..=g {
            let lo = qc.map(|c| (c - r).max(0));
            let hi = qc.map(|c| (c + r).min(g - 1));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let ring = (x - qc[0]).abs().max((y - qc[1]).abs()).max((z - qc[2]).abs());
                        if ring != r {
                            continue;
                        }
                        let c = ((z * g + y) * g + x) as usize;
                        for &i in &self.order[self.start[c]..self.start[c + 1]] {
                            insert(&mut best, k, (squared_distance(query, &self.points[i]), i));
                        }
                    }
                }
            }
            if best.len() < k {
                continue;
            }
            // Distance from the query to the nearest face of the visited box
            // that still has unvisited cells behind it.
            let mut bound = f64::INFINITY;
            for a in 0..3 {
                if qc[a] - r > 0 {
                    bound = bound.min(query[a] - (qc[a] - r) as f64 * h);
                }
                if qc[a] + r + 1 < g {
                    bound = bound.min((qc[a] + r + 1) as f64 * h - query[a]);
                }
            }
            if bound.is_infinite() || best[k - 1].0.sqrt() + STOP_MARGIN < bound {
                break;
            }
        }
        best.into_iter().map(|(_, i)| i).collect()
    }
}

#[inline]
fn axis_cell(v: f64, cells: usize) -> usize {
    let c = (v * cells as f64).floor();
    if c.is_nan() || c < 0.0 {
        0
    } else {
        (c as usize).min(cells - 1)
    }
}

#[inline]
fn cell_key(p: &[f64; 3], cells: usize) -> usize {
    (axis_cell(p[2], cells) * cells + axis_cell(p[1], cells)) * cells + axis_cell(p[0], cells)
}

#[inline]
fn less(a: (f64, usize), b: (f64, usize)) -> bool {
    match a.0.total_cmp(&b.0) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Equal => a.1 < b.1,
        std::cmp::Ordering::Greater => false,
    }
}

fn insert(best: &mut Vec<(f64, usize)>, k: usize, cand: (f64, usize)) {
    if best.len() == k && !less(cand, best[k - 1]) {
        return;
    }
    let pos = best.partition_point(|&e| less(e, cand));
    best.insert(pos, cand);
    best.truncate(k);
}

/// For every query, the `k` nearest points by Euclidean distance with ties
/// broken by ascending index; each row is sorted nearest first.
pub fn knn_indices(coords: &Coords, queries: &Coords, k: usize) -> Result<Neighbors> {
    if k == 0 {
        return Err(Error::contract("knn needs k >= 1"));
    }
    if k > coords.len() {
        return Err(Error::contract(format!(
            "knn with k = {k} over {} points",
            coords.len()
        )));
    }
    let index = GridIndex::build(coords);
    let q = queries.as_slice();
    let rows = par::map_range(q.len(), 32, |i| index.nearest(&q[i], k));
    Ok(Neighbors {
        k,
        indices: rows.concat(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coinciding_query() {
        let pts = Coords::new(vec![[0.1, 0.2, 0.3], [0.5, 0.5, 0.5], [0.9, 0.1, 0.4]]);
        let q = Coords::new(vec![[0.5, 0.5, 0.5]]);
        assert_eq!(knn_indices(&pts, &q, 1).unwrap().row(0), &[1]);
    }

    #[test]
    fn collinear_points() {
        let pts = Coords::new(vec![[1.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let q = Coords::new(vec![[0.0, 0.0, 0.0]]);
        assert_eq!(knn_indices(&pts, &q, 2).unwrap().row(0), &[2, 1]);
    }

    #[test]
    fn equidistant_ties_take_lowest_indices() {
        let pts = Coords::new(vec![
            [0.0, 0.5, 0.5],
            [1.0, 0.5, 0.5],
            [0.5, 0.0, 0.5],
            [0.5, 1.0, 0.5],
            [0.5, 0.5, 0.0],
            [0.5, 0.5, 1.0],
        ]);
        let q = Coords::new(vec![[0.5, 0.5, 0.5]]);
        assert_eq!(knn_indices(&pts, &q, 3).unwrap().row(0), &[0, 1, 2]);
    }

    #[test]
    fn k_larger_than_n() {
        let pts = Coords::new(vec![[0.0; 3]]);
        assert!(matches!(knn_indices(&pts, &pts, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn slot_extraction() {
        let pts = Coords::new(vec![[0.0, 0.0, 0.0], [0.2, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let q = Coords::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let nb = knn_indices(&pts, &q, 2).unwrap();
        assert_eq!(nb.slot(0), vec![0, 2]);
        assert_eq!(nb.slot(1), vec![1, 1]);
    }
}
