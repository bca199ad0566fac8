//! Pinned generator and discriminator outputs. Any change to initialisation
//! order, RNG streams or reduction order shows up here.

use pcc_core::network::{discriminator_forward, generator_forward, HeadInit, ModelConfig, ModelParams};
use pcc_core::par;
use pcc_core::pointspace::Volume;

fn probe() -> (ModelParams, Volume) {
    let p = ModelParams::init(ModelConfig::for_side(16, 4), 1, HeadInit::Uniform).unwrap();
    let v = Volume::from_fn([16; 3], |x, y, z| 0.5 + ((x * 7 + y * 3 + z * 5) % 11) as f64 / 10.0).unwrap();
    (p, v)
}

#[test]
fn generator_output_is_pinned() {
    let (p, v) = probe();
    for threads in [1, 3] {
        let out = par::with_threads(threads, || generator_forward(&v, &p).unwrap());
        let sum: f64 = out.voxels().iter().sum();
        assert_eq!(sum.to_bits(), 0x40a6253b9397f7df, "threads {threads}: sum {sum}");
        for (i, bits) in [
            (0, 0x3ff056aa273fcec6u64),
            (1, 0x3ff79d2addce590f),
            (777, 0x3fd2e68e5e3b208c),
            (4095, 0x3fe3fc4edca53417),
        ] {
            assert_eq!(out.voxels()[i].to_bits(), bits, "threads {threads}: voxel {i}");
        }
        let d = par::with_threads(threads, || discriminator_forward(&v, &out, &p).unwrap());
        assert_eq!(d.to_bits(), 0x3fe126fd32616af2, "threads {threads}: d {d}");
    }
}
