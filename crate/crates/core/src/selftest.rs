//! Quick invariant sweep used by the `selftest` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contextcluster::{
    aggregate_cluster, argmax_assignment, dispatch_cluster, ClusterMembers, ClusterParams,
};
use crate::datasim::{assemble_patches, decode_volume, encode_volume, extract_patches, PatchGrid};
use crate::diffcore::{cosine_matrix_values, sigmoid, Tape, Tensor};
use crate::error::Result;
use crate::metrics::{nmse, psnr, ssim};
use crate::network::{
    decode_checkpoint, encode_checkpoint, generator_forward, HeadInit, ModelConfig, ModelParams,
};
use crate::contextcluster::Routing;
use crate::pointspace::{knn_indices, squared_distance, Coords, Volume};
use crate::training::{gradcheck, lr_at_epoch, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SelfCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> SelfCheck {
    match outcome {
        Ok((passed, detail)) => SelfCheck { name, passed, detail },
        Err(e) => SelfCheck {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn random_coords(rng: &mut ChaCha8Rng, n: usize) -> Coords {
    Coords::new((0..n).map(|_| [0; 3].map(|_: i32| rng.random_range(0.0..1.0))).collect())
}

fn random_volume(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Volume {
    let n = shape.iter().product();
    Volume::new(shape, (0..n).map(|_| rng.random_range(0.1..2.0)).collect()).expect("positive shape")
}

fn knn_matches_scan(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    for round in 0..20 {
        let n = rng.random_range(1..300);
        let k = rng.random_range(1..=n.min(9));
        let pts = random_coords(rng, n);
        let qs = random_coords(rng, 5);
        let nb = knn_indices(&pts, &qs, k)?;
        for (q, query) in qs.iter().enumerate() {
            let mut all: Vec<(f64, usize)> = pts.iter().map(|p| squared_distance(query, p)).zip(0..).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all[..k].iter().map(|e| e.1).collect();
            if nb.row(q) != want.as_slice() {
                return Ok((false, format!("round {round}, query {q}")));
            }
        }
    }
    Ok((true, "20 random instances".into()))
}

fn assignment_matches_scan(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    for round in 0..20 {
        let (d, n, c) = (rng.random_range(1..6), rng.random_range(1..100), rng.random_range(1..28));
        let f = Tensor::matrix(d, n, (0..d * n).map(|_| rng.random_range(-1.0..1.0) + 0.01).collect())?;
        let centers = Tensor::matrix(d, c, (0..d * c).map(|_| rng.random_range(-1.0..1.0) + 0.01).collect())?;
        let got = argmax_assignment(&f, &centers)?;
        let sims = cosine_matrix_values(&f, &centers)?;
        for m in 0..n {
            let mut best = 0;
            for j in 1..c {
                if sims.at(j, m) > sims.at(best, m) {
                    best = j;
                }
            }
            if got[m] != best {
                return Ok((false, format!("round {round}, point {m}")));
            }
        }
    }
    Ok((true, "20 random instances".into()))
}

fn aggregation_matches_formula(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (d, m) = (rng.random_range(1..8), rng.random_range(1..16));
        let (alpha, beta) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
        let v: Vec<f64> = (0..d * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vc: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let params = ClusterParams {
            alpha: tape.constant(Tensor::scalar(alpha)),
            beta: tape.constant(Tensor::scalar(beta)),
        };
        let members = ClusterMembers {
            features: tape.constant(Tensor::matrix(d, m, v.clone())?),
            similarity: tape.constant(Tensor::matrix(1, m, s.clone())?),
        };
        let center = tape.constant(Tensor::matrix(d, 1, vc.clone())?);
        let g = aggregate_cluster(Some(members), center, params)?;
        let out = dispatch_cluster(members, g, params)?.value();
        let w: Vec<f64> = s.iter().map(|x| sigmoid(alpha * x + beta)).collect();
        let norm = 1.0 + w.iter().sum::<f64>();
        for r in 0..d {
            let gr = (vc[r] + (0..m).map(|i| w[i] * v[r * m + i]).sum::<f64>()) / norm;
            worst = worst.max((g.value().data()[r] - gr).abs());
            for i in 0..m {
                worst = worst.max((out.at(r, i) - (v[r * m + i] + w[i] * gr)).abs());
            }
        }
    }
    Ok((worst < 1e-12, format!("max deviation {worst:e}")))
}

fn patch_round_trip(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let v = random_volume(rng, [20, 12, 16]);
    let (grid, patches) = extract_patches(&v, 8, 4)?;
    let same = assemble_patches(&grid, &patches)? == v;
    let count = PatchGrid::new([128; 3], 64, 8)?.len();
    Ok((same && count == 729, format!("identity {same}, 128/64/8 gives {count} patches")))
}

fn file_round_trips(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let v = random_volume(rng, [5, 3, 4]);
    let bytes = encode_volume(&v);
    let vol_ok = encode_volume(&decode_volume("selftest".as_ref(), &bytes)?) == bytes;
    let cfg = ModelConfig::for_side(16, 2);
    let p = ModelParams::init(cfg, 4, HeadInit::Uniform)?;
    let ck = encode_checkpoint(&p);
    let q = decode_checkpoint("selftest".as_ref(), &ck, cfg)?;
    let ck_ok = q.generator == p.generator && q.discriminator == p.discriminator;
    Ok((vol_ok && ck_ok, format!("volume {vol_ok}, checkpoint {ck_ok}")))
}

fn identity_warm_start(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let p = ModelParams::init(ModelConfig::for_side(16, 4), 9, HeadInit::Zero)?;
    for i in 0..3 {
        let v = random_volume(rng, [16; 3]);
        if generator_forward(&v, &p)? != v {
            return Ok((false, format!("volume {i} changed")));
        }
    }
    Ok((true, "3 volumes unchanged".into()))
}

fn stage_arithmetic() -> Result<(bool, String)> {
    for side in [16, 32] {
        let cfg = ModelConfig::for_side(side, 2);
        let p = ModelParams::init(cfg, 1, HeadInit::Uniform)?;
        let tape = Tape::new();
        let b = p.generator.bind(&tape, false);
        let x = tape.constant(Volume::filled([side; 3], 1.0)?.to_row());
        let (_, trace) = p.generator_layout().forward_traced(&b, x, &cfg, &Routing::free())?;
        let mut expected = vec![(side.pow(3), 2)];
        for i in 1..=4 {
            expected.push((expected[i - 1].0 / 8, expected[i - 1].1 * 2));
        }
        for i in 5..=8 {
            expected.push((expected[i - 1].0 * 8, expected[i - 1].1 / 2));
        }
        if trace != expected {
            return Ok((false, format!("S = {side}: {trace:?}")));
        }
    }
    Ok((true, "S = 16, 32".into()))
}

fn metric_identities(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let v = random_volume(rng, [8; 3]);
    let ok = psnr(&v, &v)?.is_infinite() && ssim(&v, &v)? == 1.0 && nmse(&v, &v)? == 0.0;
    Ok((ok, "psnr inf, ssim 1, nmse 0 on identical volumes".into()))
}

fn schedule_values() -> Result<(bool, String)> {
    let c = TrainConfig::default();
    let got = [lr_at_epoch(10, &c)?, lr_at_epoch(100, &c)?, lr_at_epoch(150, &c)?];
    Ok((got == [2e-4, 1e-4, 0.0], format!("{got:?}")))
}

fn gradients() -> Result<(bool, String)> {
    let r = gradcheck(ModelConfig::for_side(16, 4), 1, 50, 1e-5)?;
    Ok((r.max_error() < 1e-4, format!("max relative error {:e}", r.max_error())))
}

/// Runs every check; none aborts the others.
pub fn run_selftest(seed: u64) -> Vec<SelfCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        check("knn matches exhaustive scan", knn_matches_scan(&mut rng)),
        check("assignment matches exhaustive argmax", assignment_matches_scan(&mut rng)),
        check("aggregate/dispatch match formula", aggregation_matches_formula(&mut rng)),
        check("extract/assemble identity", patch_round_trip(&mut rng)),
        check("volume and checkpoint round-trips", file_round_trips(&mut rng)),
        check("zero head is identity", identity_warm_start(&mut rng)),
        check("stage count/width arithmetic", stage_arithmetic()),
        check("metric identities", metric_identities(&mut rng)),
        check("learning-rate schedule", schedule_values()),
        check("generator/discriminator gradients", gradients()),
    ]
}
