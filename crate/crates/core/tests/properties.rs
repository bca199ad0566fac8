use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pcc_core::contextcluster::{
    aggregate_cluster, assign_clusters, context_cluster_layer, ClusterMembers, ClusterParams, Routing,
};
use pcc_core::datasim::{assemble_patches, extract_patches, PatchGrid};
use pcc_core::diffcore::{cosine_matrix_values, sigmoid, Tape, Tensor};
use pcc_core::metrics::{nmse, psnr, ssim};
use pcc_core::network::ParamStore;
use pcc_core::pointspace::{anchor_grid, knn_indices, Coords, PointSet, Volume};
use pcc_core::training::{adam_step, lr_at_epoch, AdamConfig, OptimizerState, TrainConfig};

fn coords(n: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(0.0..1.0f64), n)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![-1.0..-0.05f64, 0.05..1.0f64], rows * cols)
}

fn brute_knn(pts: &[[f64; 3]], q: &[f64; 3], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = pts
        .iter()
        .enumerate()
        .map(|(i, p)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2), i))
        .collect();
    d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|e| e.1).collect()
}

fn transpose(cols: &[Vec<f64>]) -> Vec<f64> {
    let (n, d) = (cols.len(), cols[0].len());
    let mut out = vec![0.0; d * n];
    for (i, c) in cols.iter().enumerate() {
        for r in 0..d {
            out[r * n + i] = c[r];
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn knn_agrees_with_exhaustive_scan(
        (pts, qs, k) in (1usize..512).prop_flat_map(|n| (coords(n), coords(6), 1..=n.min(12)))
    ) {
        let nb = knn_indices(&Coords::new(pts.clone()), &Coords::new(qs.clone()), k).unwrap();
        for (i, q) in qs.iter().enumerate() {
            let want = brute_knn(&pts, q, k);
            prop_assert_eq!(nb.row(i), want.as_slice());
        }
    }

    #[test]
    fn knn_on_lattice_ties_match_scan(side in 2usize..7, per_axis in 1usize..4, k in 1usize..9) {
        let pts: Vec<[f64; 3]> = (0..side.pow(3))
            .map(|i| [(i / (side * side)) as f64, ((i / side) % side) as f64, (i % side) as f64].map(|v| v / (side - 1) as f64))
            .collect();
        let anchors = anchor_grid(pts.len(), per_axis.min(side)).unwrap();
        let k = k.min(pts.len());
        let nb = knn_indices(&Coords::new(pts.clone()), &anchors, k).unwrap();
        for (i, q) in anchors.iter().enumerate() {
            let want = brute_knn(&pts, q, k);
            prop_assert_eq!(nb.row(i), want.as_slice());
        }
    }

    #[test]
    fn assignment_partitions_points(
        (d, n, c, f, ctr) in (1usize..6, 1usize..200, 1usize..28)
            .prop_flat_map(|(d, n, c)| (Just(d), Just(n), Just(c), matrix(d, n), matrix(d, c)))
    ) {
        let tape = Tape::new();
        let set = PointSet::new(
            tape.constant(Tensor::matrix(d, n, f).unwrap()),
            Coords::new(vec![[0.5; 3]; n]),
            None,
        ).unwrap();
        let a = assign_clusters(&set, tape.constant(Tensor::matrix(d, c, ctr).unwrap())).unwrap();
        let mut seen = vec![0usize; n];
        let mut total = 0;
        for j in 0..c {
            let m = a.members(j);
            total += m.len();
            for i in m {
                seen[i] += 1;
            }
        }
        prop_assert_eq!(total, n);
        prop_assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn aggregate_stays_in_convex_hull(
        (d, m, feats, sims, center) in (1usize..16, 1usize..32).prop_flat_map(|(d, m)| {
            (Just(d), Just(m), matrix(d, m), prop::collection::vec(-1.0..1.0f64, m), matrix(d, 1))
        }),
        alpha in -4.0..4.0f64,
        beta in -3.0..3.0f64,
    ) {
        let tape = Tape::new();
        let p = ClusterParams {
            alpha: tape.constant(Tensor::scalar(alpha)),
            beta: tape.constant(Tensor::scalar(beta)),
        };
        let members = ClusterMembers {
            features: tape.constant(Tensor::matrix(d, m, feats.clone()).unwrap()),
            similarity: tape.constant(Tensor::matrix(1, m, sims).unwrap()),
        };
        let g = aggregate_cluster(Some(members), tape.constant(Tensor::matrix(d, 1, center.clone()).unwrap()), p)
            .unwrap()
            .value();
        for r in 0..d {
            let row = &feats[r * m..(r + 1) * m];
            let lo = row.iter().copied().fold(center[r], f64::min);
            let hi = row.iter().copied().fold(center[r], f64::max);
            prop_assert!(g.data()[r] >= lo - 1e-12 && g.data()[r] <= hi + 1e-12);
        }
    }

    #[test]
    fn layer_commutes_with_point_permutation(
        (n, pts, cols, perm) in (9usize..80).prop_flat_map(|n| {
            (
                Just(n),
                coords(n),
                prop::collection::vec(prop::collection::vec(prop_oneof![-1.0..-0.05f64, 0.05..1.0f64], 3), n),
                Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
            )
        }),
        alpha in 0.1..2.0f64,
    ) {
        let run = |pts: Vec<[f64; 3]>, cols: &[Vec<f64>]| {
            let tape = Tape::new();
            let set = PointSet::new(tape.constant(Tensor::matrix(3, n, transpose(cols)).unwrap()), Coords::new(pts), None).unwrap();
            let p = ClusterParams {
                alpha: tape.constant(Tensor::scalar(alpha)),
                beta: tape.constant(Tensor::scalar(-0.2)),
            };
            context_cluster_layer(&set, p, 2, 3, &Routing::free()).unwrap().features.value()
        };
        let base = run(pts.clone(), &cols);
        let shuffled = run(
            perm.iter().map(|&i| pts[i]).collect(),
            &perm.iter().map(|&i| cols[i].clone()).collect::<Vec<_>>(),
        );
        for (slot, &i) in perm.iter().enumerate() {
            for r in 0..3 {
                prop_assert!((shuffled.at(r, slot) - base.at(r, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_and_cosine_ranges(x in -700.0..700.0f64, f in matrix(4, 5), c in matrix(4, 3)) {
        let s = sigmoid(x);
        prop_assert!(s >= 0.0 && s <= 1.0);
        if x.abs() < 30.0 {
            prop_assert!(s > 0.0 && s < 1.0);
        }
        let cos = cosine_matrix_values(&Tensor::matrix(4, 5, f).unwrap(), &Tensor::matrix(4, 3, c).unwrap()).unwrap();
        prop_assert!(cos.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn extract_assemble_is_identity(
        (side, stride, counts) in (1usize..5).prop_flat_map(|side| {
            (Just(side), 1..=side, prop::array::uniform3(0usize..4))
        }),
        seed in any::<u64>(),
    ) {
        let shape = counts.map(|c| side + c * stride);
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Volume::new(shape, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap();
        let (grid, patches) = extract_patches(&v, side, stride).unwrap();
        prop_assert_eq!(grid.len(), counts.iter().map(|c| c + 1).product::<usize>());
        prop_assert_eq!(assemble_patches(&grid, &patches).unwrap(), v);
    }

    #[test]
    fn patch_count_formula(extent in 4usize..64, side in 1usize..5, stride in 1usize..5) {
        let shape = [extent, extent, extent];
        match PatchGrid::new(shape, side, stride) {
            Ok(g) => {
                prop_assert!(extent >= side && (extent - side) % stride == 0 && (stride <= side || extent == side));
                prop_assert_eq!(g.len(), ((extent - side) / stride + 1).pow(3));
            }
            Err(_) => prop_assert!(extent < side || (extent - side) % stride != 0 || (stride > side && extent > side)),
        }
    }

    #[test]
    fn lr_schedule_shape(epochs in 1usize..300, frac in 0.0..=1.0f64) {
        let plateau = ((epochs as f64) * frac) as usize;
        let tc = TrainConfig { epochs, lr_plateau_epochs: plateau, ..TrainConfig::default() };
        let lr: Vec<f64> = (0..=epochs).map(|e| lr_at_epoch(e, &tc).unwrap()).collect();
        prop_assert!(lr.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(lr[epochs], 0.0);
        prop_assert!(lr[..plateau.min(epochs)].iter().all(|&v| v == tc.lr_init));
        if plateau < epochs {
            // Continuous at the plateau boundary.
            prop_assert!((lr[plateau] - tc.lr_init).abs() <= 1e-15 * tc.lr_init);
        }
        prop_assert!(lr_at_epoch(epochs + 1, &tc).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point(vals in prop::collection::vec(-5.0..5.0f64, 1..20), steps in 1usize..5) {
        let mut store = ParamStore::new();
        store.add("p", Tensor::matrix(1, vals.len(), vals.clone()).unwrap());
        let mut state = OptimizerState::new(&store);
        let zeros = vec![Tensor::zeros(&[1, vals.len()])];
        for _ in 0..steps {
            adam_step(&mut store, &zeros, &mut state, 2e-4, AdamConfig::default()).unwrap();
        }
        prop_assert_eq!(store.tensors()[0].data(), vals.as_slice());
    }

    #[test]
    fn metrics_match_direct_sums(
        x in prop::collection::vec(0.0..3.0f64, 512),
        y in prop::collection::vec(0.1..3.0f64, 512),
    ) {
        let (vx, vy) = (Volume::cube(8, x.clone()).unwrap(), Volume::cube(8, y.clone()).unwrap());
        let sq: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
        let peak = y.iter().copied().fold(f64::MIN, f64::max);
        let want_psnr = 10.0 * (peak * peak * 512.0 / sq).log10();
        prop_assert!((psnr(&vx, &vy).unwrap() - want_psnr).abs() < 1e-10);
        let want_nmse = sq / y.iter().map(|b| b * b).sum::<f64>();
        prop_assert!((nmse(&vx, &vy).unwrap() - want_nmse).abs() < 1e-10);
        prop_assert_eq!(ssim(&vy, &vy).unwrap(), 1.0);
        prop_assert_eq!(nmse(&vy, &vy).unwrap(), 0.0);
        let s = ssim(&vx, &vy).unwrap();
        prop_assert!(s <= 1.0 + 1e-12 && s >= -1.0 - 1e-12);
    }
}
