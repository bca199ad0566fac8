//! Tape gradients of every primitive and of the clustering kernels against
//! central finite differences, over ten seeds each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pcc_core::contextcluster::{
    aggregate_cluster, context_cluster_layer, dispatch_cluster, ClusterMembers, ClusterParams, Routing,
};
use pcc_core::diffcore::{finite_diff_check, Tape, Tensor, Var};
use pcc_core::pointspace::{Coords, PointSet};
use pcc_core::Result;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// A random fixed weighting so the scalar loss sees every output element.
fn probe<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let (r, c) = y.dims();
    y.mul(tape.constant(rand_matrix(&mut rng, r, c, -1.0, 1.0)))?.sum()
}

fn check_all<F>(name: &str, lo: f64, hi: f64, rows: usize, cols: usize, f: F)
where
    F: for<'t> Fn(&'t Tape, Var<'t>, &mut ChaCha8Rng) -> Result<Var<'t>>,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let point = rand_matrix(&mut rng, rows, cols, lo, hi);
        let err = finite_diff_check(
            |tape, x| {
                let mut inner = ChaCha8Rng::seed_from_u64(seed + 1000);
                let y = f(tape, x, &mut inner)?;
                probe(tape, y, seed)
            },
            &point,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "{name}, seed {seed}: {err:e}");
    }
}

#[test]
fn linear_in_input_weight_and_bias() {
    check_all("linear/x", -1.0, 1.0, 3, 5, |t, x, r| {
        x.linear(t.constant(rand_matrix(r, 4, 3, -1.0, 1.0)), Some(t.constant(rand_matrix(r, 4, 1, -1.0, 1.0))))
    });
    check_all("linear/w", -1.0, 1.0, 4, 3, |t, w, r| {
        t.constant(rand_matrix(r, 3, 5, -1.0, 1.0)).linear(w, None)
    });
    check_all("linear/b", -1.0, 1.0, 4, 1, |t, b, r| {
        t.constant(rand_matrix(r, 3, 5, -1.0, 1.0))
            .linear(t.constant(rand_matrix(r, 4, 3, -1.0, 1.0)), Some(b))
    });
}

#[test]
fn elementwise_primitives() {
    check_all("sigmoid", -3.0, 3.0, 2, 4, |_, x, _| x.sigmoid());
    check_all("add", -1.0, 1.0, 2, 4, |t, x, r| x.add(t.constant(rand_matrix(r, 2, 4, -1.0, 1.0))));
    check_all("sub", -1.0, 1.0, 2, 4, |t, x, r| t.constant(rand_matrix(r, 2, 4, -1.0, 1.0)).sub(x));
    check_all("mul", -1.0, 1.0, 2, 4, |t, x, r| x.mul(t.constant(rand_matrix(r, 2, 4, -1.0, 1.0))));
    check_all("mul/self", -1.0, 1.0, 2, 4, |_, x, _| x.mul(x));
    check_all("div/num", -1.0, 1.0, 2, 4, |t, x, r| x.div(t.constant(rand_matrix(r, 2, 4, 0.5, 2.0))));
    check_all("div/den", 0.5, 2.0, 2, 4, |t, x, r| t.constant(rand_matrix(r, 2, 4, -1.0, 1.0)).div(x));
    check_all("scale", -1.0, 1.0, 2, 4, |_, x, _| x.scale(-2.5));
    check_all("shift", -1.0, 1.0, 2, 4, |_, x, _| x.shift(0.75)?.mul(x));
    check_all("abs", 0.1, 1.0, 2, 4, |_, x, _| x.scale(-1.0)?.abs());
    check_all("log", 0.2, 3.0, 2, 4, |_, x, _| x.log());
}

#[test]
fn broadcasting_operands() {
    check_all("mul/row", -1.0, 1.0, 1, 4, |t, w, r| t.constant(rand_matrix(r, 3, 4, -1.0, 1.0)).mul(w));
    check_all("add/col", -1.0, 1.0, 3, 1, |t, c, r| t.constant(rand_matrix(r, 3, 4, -1.0, 1.0)).add(c));
    check_all("mul/scalar", -1.0, 1.0, 1, 1, |t, s, r| t.constant(rand_matrix(r, 3, 4, -1.0, 1.0)).mul(s));
}

#[test]
fn reductions_and_reshaping() {
    check_all("sum", -1.0, 1.0, 3, 4, |_, x, _| x.mul(x)?.sum());
    check_all("mean", -1.0, 1.0, 3, 4, |_, x, _| x.mul(x)?.mean());
    check_all("sum_rows", -1.0, 1.0, 3, 4, |_, x, _| x.mul(x)?.sum_rows());
    check_all("sum_cols", -1.0, 1.0, 3, 4, |_, x, _| x.mul(x)?.sum_cols());
    check_all("slice_rows", -1.0, 1.0, 5, 3, |_, x, _| x.slice_rows(1, 3));
    check_all("concat_rows", -1.0, 1.0, 2, 3, |t, x, r| {
        t.concat_rows(&[x, t.constant(rand_matrix(r, 1, 3, -1.0, 1.0)), x])
    });
    check_all("concat_cols", -1.0, 1.0, 2, 3, |t, x, r| {
        t.concat_cols(&[t.constant(rand_matrix(r, 2, 2, -1.0, 1.0)), x, x])
    });
    check_all("gather", -1.0, 1.0, 2, 5, |_, x, _| x.gather_cols(vec![4, 0, 0, 2, 3, 4]));
    check_all("scatter", -1.0, 1.0, 2, 5, |_, x, _| x.scatter_add_cols(vec![1, 0, 1, 2, 1], 3));
}

#[test]
fn cosine_similarities() {
    check_all("cosine_matrix/points", -1.0, 1.0, 3, 6, |t, x, r| {
        x.cosine_matrix(t.constant(rand_matrix(r, 3, 4, -1.0, 1.0)))
    });
    check_all("cosine_matrix/centers", -1.0, 1.0, 3, 4, |t, c, r| {
        t.constant(rand_matrix(r, 3, 6, -1.0, 1.0)).cosine_matrix(c)
    });
    check_all("cosine_pairs", -1.0, 1.0, 3, 6, |t, x, r| {
        x.cosine_pairs(t.constant(rand_matrix(r, 3, 6, -1.0, 1.0)))
    });
}

fn cluster_params<'t>(alpha: Var<'t>, beta: Var<'t>) -> ClusterParams<'t> {
    ClusterParams { alpha, beta }
}

#[test]
fn aggregate_and_dispatch_in_every_input() {
    type Fixed<'t> = (Var<'t>, Var<'t>, Var<'t>, Var<'t>, Var<'t>);
    fn fixed<'t>(t: &'t Tape, r: &mut ChaCha8Rng) -> Fixed<'t> {
        (
            t.constant(rand_matrix(r, 3, 5, -1.0, 1.0)),
            t.constant(rand_matrix(r, 1, 5, -1.0, 1.0)),
            t.constant(rand_matrix(r, 3, 1, -1.0, 1.0)),
            t.constant(Tensor::scalar(r.random_range(-2.0..2.0))),
            t.constant(Tensor::scalar(r.random_range(-1.0..1.0))),
        )
    }
    fn both<'t>(
        f: Var<'t>,
        s: Var<'t>,
        c: Var<'t>,
        p: ClusterParams<'t>,
    ) -> Result<Var<'t>> {
        let m = ClusterMembers { features: f, similarity: s };
        let g = aggregate_cluster(Some(m), c, p)?;
        dispatch_cluster(m, g, p)
    }
    check_all("cluster/features", -1.0, 1.0, 3, 5, |t, x, r| {
        let (_, s, c, a, b) = fixed(t, r);
        both(x, s, c, cluster_params(a, b))
    });
    check_all("cluster/similarity", -1.0, 1.0, 1, 5, |t, x, r| {
        let (f, _, c, a, b) = fixed(t, r);
        both(f, x, c, cluster_params(a, b))
    });
    check_all("cluster/center", -1.0, 1.0, 3, 1, |t, x, r| {
        let (f, s, _, a, b) = fixed(t, r);
        both(f, s, x, cluster_params(a, b))
    });
    check_all("cluster/alpha", -2.0, 2.0, 1, 1, |t, x, r| {
        let (f, s, c, _, b) = fixed(t, r);
        both(f, s, c, cluster_params(x, b))
    });
    check_all("cluster/beta", -1.0, 1.0, 1, 1, |t, x, r| {
        let (f, s, c, a, _) = fixed(t, r);
        both(f, s, c, cluster_params(a, x))
    });
}

#[test]
fn full_layer_with_frozen_routing() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 40;
        let coords = Coords::new((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect());
        let point = rand_matrix(&mut rng, 4, n, -1.0, 1.0);
        let alpha = rng.random_range(0.5..2.0);
        let layer = |routing: &Routing, tape: &Tape, x: Tensor| -> Result<f64> {
            let feats = tape.constant(x);
            let set = PointSet::new(feats, coords.clone(), None)?;
            let p = ClusterParams {
                alpha: tape.constant(Tensor::scalar(alpha)),
                beta: tape.constant(Tensor::scalar(0.1)),
            };
            routing.rewind();
            let out = context_cluster_layer(&set, p, 2, 3, routing)?;
            probe(tape, out.features, seed)?.item()
        };
        // Analytic pass records the assignment.
        let routing = Routing::recording();
        let tape = Tape::new();
        let x = tape.leaf(point.clone());
        let set = PointSet::new(x, coords.clone(), None).unwrap();
        let p = ClusterParams {
            alpha: tape.constant(Tensor::scalar(alpha)),
            beta: tape.constant(Tensor::scalar(0.1)),
        };
        let out = context_cluster_layer(&set, p, 2, 3, &routing).unwrap();
        let loss = probe(&tape, out.features, seed).unwrap();
        let grad = tape.backward(loss).unwrap().get(x);
        let routing = routing.into_replay();
        let mut worst: f64 = 0.0;
        for i in 0..point.numel() {
            let numeric = pcc_core::diffcore::central_difference(
                |d| {
                    let mut q = point.clone();
                    q.data_mut()[i] += d;
                    layer(&routing, &Tape::new(), q)
                },
                STEP,
            )
            .unwrap();
            worst = worst.max(pcc_core::diffcore::relative_error(grad.data()[i], numeric));
        }
        assert!(worst < TOL, "seed {seed}: {worst:e}");
    }
}
