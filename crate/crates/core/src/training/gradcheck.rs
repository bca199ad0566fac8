//! End-to-end gradient verification of the generator and discriminator
//! objectives against central finite differences.
//!
//! The discrete cluster assignments are recorded during the analytic pass
//! and replayed for every perturbed evaluation, so both sides differentiate
//! the same smooth branch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::{discriminator_loss_var, generator_adv_var, l1_loss_var, total_generator_loss_var, GanLoss};
use crate::contextcluster::Routing;
use crate::diffcore::{central_difference, relative_error, Tape, Tensor, Var};
use crate::error::Result;
use crate::network::{Bound, HeadInit, ModelConfig, ModelParams};
use crate::pointspace::Volume;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    /// Coordinates probed per objective.
    pub coordinates: usize,
    pub generator_l1: f64,
    pub discriminator: f64,
    pub generator_total: f64,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.generator_l1.max(self.discriminator).max(self.generator_total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Generator,
    Discriminator,
}

struct Probe<'a> {
    params: &'a ModelParams,
    lpet: Tensor,
    spet: Tensor,
    lambda: f64,
}

#[derive(Clone, Copy)]
enum Objective {
    GeneratorL1,
    Discriminator,
    GeneratorTotal,
}

impl Probe<'_> {
    fn loss<'t>(
        &self,
        tape: &'t Tape,
        gen: &Bound<'t>,
        disc: &Bound<'t>,
        objective: Objective,
        routing: &Routing,
    ) -> Result<Var<'t>> {
        let cfg = &self.params.config;
        let x = tape.constant(self.lpet.clone());
        let y = tape.constant(self.spet.clone());
        let fake = self.params.generator_layout().forward(gen, x, cfg, routing)?;
        let d = self.params.discriminator_layout();
        match objective {
            Objective::GeneratorL1 => l1_loss_var(fake, y),
            Objective::Discriminator => {
                let real = d.forward(disc, x, y, cfg, routing)?;
                let fake = d.forward(disc, x, fake.detach(), cfg, routing)?;
                discriminator_loss_var(real, fake)
            }
            Objective::GeneratorTotal => {
                let adv = generator_adv_var(d.forward(disc, x, fake, cfg, routing)?, GanLoss::NonSaturating)?;
                total_generator_loss_var(adv, l1_loss_var(fake, y)?, self.lambda)
            }
        }
    }

    fn side(objective: Objective) -> Side {
        match objective {
            Objective::Discriminator => Side::Discriminator,
            _ => Side::Generator,
        }
    }

    fn evaluate(&self, objective: Objective, side: Side, values: &[Tensor], routing: &Routing) -> Result<f64> {
        let tape = Tape::new();
        let (gen, disc) = match side {
            Side::Generator => (
                self.params.generator.bind_values(&tape, values),
                self.params.discriminator.bind(&tape, false),
            ),
            Side::Discriminator => (
                self.params.generator.bind(&tape, false),
                self.params.discriminator.bind_values(&tape, values),
            ),
        };
        routing.rewind();
        self.loss(&tape, &gen, &disc, objective, routing)?.item()
    }

    /// Max relative error over `coords` (tensor index, element index).
    fn check(&self, objective: Objective, coords: &[(usize, usize)], step: f64) -> Result<f64> {
        let side = Self::side(objective);
        let routing = Routing::recording();
        let analytic: Vec<Tensor> = {
            let tape = Tape::new();
            let gen = self.params.generator.bind(&tape, side == Side::Generator);
            let disc = self.params.discriminator.bind(&tape, side == Side::Discriminator);
            let loss = self.loss(&tape, &gen, &disc, objective, &routing)?;
            let grads = tape.backward(loss)?;
            let bound = if side == Side::Generator { &gen } else { &disc };
            bound.vars().iter().map(|v| grads.get(*v)).collect()
        };
        let routing = routing.into_replay();
        let base = match side {
            Side::Generator => self.params.generator.tensors(),
            Side::Discriminator => self.params.discriminator.tensors(),
        };
        let mut worst: f64 = 0.0;
        for &(t, e) in coords {
            let numeric = central_difference(
                |delta| {
                    let mut values = base.to_vec();
                    values[t].data_mut()[e] += delta;
                    self.evaluate(objective, side, &values, &routing)
                },
                step,
            )?;
            worst = worst.max(relative_error(analytic[t].data()[e], numeric));
        }
        Ok(worst)
    }
}

/// One element of every tensor, then uniformly random extra coordinates up
/// to `min_coords`.
fn pick_coordinates(tensors: &[Tensor], min_coords: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut coords: Vec<(usize, usize)> = tensors
        .iter()
        .enumerate()
        .map(|(t, x)| (t, rng.random_range(0..x.numel())))
        .collect();
    while coords.len() < min_coords {
        let t = rng.random_range(0..tensors.len());
        coords.push((t, rng.random_range(0..tensors[t].numel())));
    }
    coords
}

/// Random LPET in `[0.2, 2)` and a target offset by `3..4` with random sign,
/// far enough that no voxel of the L1 term sits near its kink.
fn probe_volumes(side: usize, rng: &mut ChaCha8Rng) -> (Volume, Volume) {
    let n = side.pow(3);
    let lpet: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
    let spet = lpet
        .iter()
        .map(|v| {
            let gap = rng.random_range(3.0..4.0);
            if rng.random_bool(0.5) {
                v + gap
            } else {
                v - gap
            }
        })
        .collect();
    (
        Volume::cube(side, lpet).expect("cube"),
        Volume::cube(side, spet).expect("cube"),
    )
}

/// Checks the generator L1, the discriminator loss and the total generator
/// loss (`lambda = 100`) at a random initialisation with a random head.
pub fn gradcheck(config: ModelConfig, seed: u64, min_coords: usize, step: f64) -> Result<GradcheckReport> {
    let params = ModelParams::init(config, seed, HeadInit::Uniform)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x6ad_c4ec));
    let (lpet, spet) = probe_volumes(config.input_side, &mut rng);
    let probe = Probe {
        params: &params,
        lpet: lpet.to_row(),
        spet: spet.to_row(),
        lambda: 100.0,
    };
    let gen_coords = pick_coordinates(params.generator.tensors(), min_coords, &mut rng);
    let disc_coords = pick_coordinates(params.discriminator.tensors(), min_coords, &mut rng);
    Ok(GradcheckReport {
        seed,
        coordinates: gen_coords.len().min(disc_coords.len()),
        generator_l1: probe.check(Objective::GeneratorL1, &gen_coords, step)?,
        discriminator: probe.check(Objective::Discriminator, &disc_coords, step)?,
        generator_total: probe.check(Objective::GeneratorTotal, &gen_coords, step)?,
    })
}
