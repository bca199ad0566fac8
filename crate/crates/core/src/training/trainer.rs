use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::infer::reconstruct_volume;
use super::losses::{discriminator_loss_var, generator_adv_var, l1_loss_var, total_generator_loss_var};
use super::optim::{adam_step, OptimizerState};
use super::schedule::{lr_at_epoch, TrainConfig};
use crate::contextcluster::Routing;
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{capped_psnr, psnr};
use crate::network::{HeadInit, ModelConfig, ModelParams};
use crate::par;
use crate::pointspace::Volume;

/// Training and validation material. Training pairs are `(lpet, spet)`
/// patches of the model's input side; validation pairs are whole volumes
/// reconstructed patch-wise with `validation_stride`.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<(Volume, Volume)>,
    pub validation: Vec<(Volume, Volume)>,
    pub validation_stride: usize,
}

/// One row of the metric log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_d: f64,
    pub loss_g_adv: f64,
    pub l1: f64,
    /// Mean capped PSNR over validation volumes; NaN without validation data.
    pub val_psnr: f64,
}

impl EpochMetrics {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch, self.lr, self.loss_d, self.loss_g_adv, self.l1, self.val_psnr
        )
    }
}

pub fn format_metric_log(log: &[EpochMetrics]) -> String {
    log.iter().map(|m| m.to_line() + "\n").collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochMetrics>,
}

struct SampleGrads {
    loss: f64,
    extra: f64,
    grads: Vec<Tensor>,
}

/// Discriminator loss and gradients for one pair; the fake is produced by
/// the current generator and held fixed.
fn discriminator_sample(params: &ModelParams, lpet: &Volume, spet: &Volume) -> Result<SampleGrads> {
    let cfg = &params.config;
    let tape = Tape::new();
    let x = tape.constant(lpet.to_row());
    let y = tape.constant(spet.to_row());
    let gb = params.generator.bind(&tape, false);
    let fake = params
        .generator_layout()
        .forward(&gb, x, cfg, &Routing::free())?
        .detach();
    let db = params.discriminator.bind(&tape, true);
    let disc = params.discriminator_layout();
    let d_real = disc.forward(&db, x, y, cfg, &Routing::free())?;
    let d_fake = disc.forward(&db, x, fake, cfg, &Routing::free())?;
    let loss = discriminator_loss_var(d_real, d_fake)?;
    let grads = tape.backward(loss)?;
    Ok(SampleGrads {
        loss: loss.item()?,
        extra: f64::NAN,
        grads: db.vars().iter().map(|v| grads.get(*v)).collect(),
    })
}

/// Generator objective for one pair: `loss` is the adversarial term (NaN when
/// disabled), `extra` the L1.
fn generator_sample(params: &ModelParams, tc: &TrainConfig, lpet: &Volume, spet: &Volume) -> Result<SampleGrads> {
    let cfg = &params.config;
    let tape = Tape::new();
    let x = tape.constant(lpet.to_row());
    let y = tape.constant(spet.to_row());
    let gb = params.generator.bind(&tape, true);
    let fake = params.generator_layout().forward(&gb, x, cfg, &Routing::free())?;
    let l1 = l1_loss_var(fake, y)?;
    let (adv, total) = if tc.adversarial {
        let db = params.discriminator.bind(&tape, false);
        let d_fake = params
            .discriminator_layout()
            .forward(&db, x, fake, cfg, &Routing::free())?;
        let adv = generator_adv_var(d_fake, tc.gan_loss)?;
        (adv.item()?, total_generator_loss_var(adv, l1, tc.lambda)?)
    } else {
        (f64::NAN, l1.scale(tc.lambda)?)
    };
    let grads = tape.backward(total)?;
    Ok(SampleGrads {
        loss: adv,
        extra: l1.item()?,
        grads: gb.vars().iter().map(|v| grads.get(*v)).collect(),
    })
}

/// Sums per-sample gradients in sample order and divides by the batch size.
fn reduce(samples: Vec<SampleGrads>) -> (f64, f64, Vec<Tensor>) {
    let n = samples.len() as f64;
    let mut iter = samples.into_iter();
    let first = iter.next().expect("nonempty batch");
    let (mut loss, mut extra, mut grads) = (first.loss, first.extra, first.grads);
    for s in iter {
        loss += s.loss;
        extra += s.extra;
        for (acc, g) in grads.iter_mut().zip(&s.grads) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    for g in &mut grads {
        for v in g.data_mut() {
            *v /= n;
        }
    }
    (loss / n, extra / n, grads)
}

fn batch_map<F>(batch: &[usize], f: F) -> Result<Vec<SampleGrads>>
where
    F: Fn(usize) -> Result<SampleGrads> + Sync,
{
    par::map_range(batch.len(), 1, |i| f(batch[i])).into_iter().collect()
}

fn ensure_finite(value: f64, what: &str, epoch: usize, batch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!(
            "non-finite {what} ({value}) at epoch {epoch}, batch {batch}"
        )))
    }
}

/// Mean capped PSNR of patch-wise reconstructions against their targets.
pub fn validation_psnr(params: &ModelParams, data: &TrainData) -> Result<f64> {
    if data.validation.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for (lpet, spet) in &data.validation {
        let epet = reconstruct_volume(lpet, params, data.validation_stride)?;
        total += capped_psnr(psnr(&epet, spet)?);
    }
    Ok(total / data.validation.len() as f64)
}

/// Fresh model from `seed` with a zero reversion head, then [`train_from`].
pub fn train_run(data: &TrainData, model: ModelConfig, tc: &TrainConfig) -> Result<TrainOutcome> {
    let params = ModelParams::init(model, tc.seed, HeadInit::Zero)?;
    train_from(params, data, tc)
}

/// Alternating updates, per batch one discriminator step on the real and
/// the detached fake pair followed by one generator step. Sample order is
/// reshuffled every epoch from a stream seeded by `tc.seed`.
pub fn train_from(params: ModelParams, data: &TrainData, tc: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(params, data, tc, &mut |_| {})
}

/// [`train_from`] reporting every epoch's metrics as soon as they exist.
pub fn train_observed(
    mut params: ModelParams,
    data: &TrainData,
    tc: &TrainConfig,
    observe: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    tc.validate()?;
    if tc.epochs == 0 {
        return Ok(TrainOutcome { params, log: Vec::new() });
    }
    if data.train.is_empty() {
        return Err(Error::contract("training needs at least one (lpet, spet) pair"));
    }
    let side = params.config.input_side;
    if let Some((i, _)) = data
        .train
        .iter()
        .enumerate()
        .find(|(_, (l, s))| l.shape() != [side; 3] || s.shape() != [side; 3])
    {
        return Err(Error::contract(format!("training pair {i} is not {side}^3")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_0f_7a1d);
    let mut g_state = OptimizerState::new(&params.generator);
    let mut d_state = OptimizerState::new(&params.discriminator);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut log = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let lr = lr_at_epoch(epoch, tc)?;
        order.shuffle(&mut rng);
        let (mut sum_d, mut sum_adv, mut sum_l1) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        let mut samples = 0usize;
        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            let mut loss_d = f64::NAN;
            if tc.adversarial {
                let per = batch_map(batch, |i| {
                    let (lpet, spet) = &data.train[i];
                    discriminator_sample(&params, lpet, spet)
                })?;
                let (loss, _, grads) = reduce(per);
                ensure_finite(loss, "discriminator loss", epoch, b)?;
                adam_step(&mut params.discriminator, &grads, &mut d_state, lr, tc.adam)?;
                loss_d = loss;
            }
            let per = batch_map(batch, |i| {
                let (lpet, spet) = &data.train[i];
                generator_sample(&params, tc, lpet, spet)
            })?;
            let l1_sum: f64 = per.iter().map(|s| s.extra).sum();
            let (adv, l1, grads) = reduce(per);
            ensure_finite(l1, "l1 loss", epoch, b)?;
            if tc.adversarial {
                ensure_finite(adv, "generator adversarial loss", epoch, b)?;
            }
            adam_step(&mut params.generator, &grads, &mut g_state, lr, tc.adam)?;
            sum_d += loss_d;
            sum_adv += adv;
            sum_l1 += l1_sum;
            batches += 1;
            samples += batch.len();
        }
        let metrics = EpochMetrics {
            epoch,
            lr,
            loss_d: sum_d / batches as f64,
            loss_g_adv: sum_adv / batches as f64,
            l1: sum_l1 / samples as f64,
            val_psnr: validation_psnr(&params, data)?,
        };
        observe(&metrics);
        log.push(metrics);
    }
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasim::{patch_pairs, simulate_cohort, CohortSpec};

    fn tiny_data(pairs: usize) -> TrainData {
        let cohort = simulate_cohort(&CohortSpec::new(1, 16, 3)).unwrap();
        let mut train = patch_pairs(&cohort, 16, 8).unwrap();
        train.truncate(pairs);
        TrainData {
            train,
            validation: Vec::new(),
            validation_stride: 16,
        }
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig::for_side(16, 2)
    }

    #[test]
    fn zero_epochs_is_noop() {
        let tc = TrainConfig {
            epochs: 0,
            lr_plateau_epochs: 0,
            ..TrainConfig::default()
        };
        let out = train_run(&tiny_data(1), tiny_model(), &tc).unwrap();
        let init = ModelParams::init(tiny_model(), tc.seed, HeadInit::Zero).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.params.generator, init.generator);
    }

    #[test]
    fn short_run_is_deterministic() {
        let tc = TrainConfig {
            epochs: 2,
            lr_plateau_epochs: 1,
            batch_size: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let data = tiny_data(3);
        let a = train_run(&data, tiny_model(), &tc).unwrap();
        let b = train_run(&data, tiny_model(), &tc).unwrap();
        assert_eq!(format_metric_log(&a.log), format_metric_log(&b.log));
        assert_eq!(a.params.generator, b.params.generator);
        assert_eq!(a.log.len(), 2);
        assert!(a.log[0].loss_d.is_finite() && a.log[0].loss_d > 0.0);
        assert!(a.log[0].val_psnr.is_nan());
    }

    #[test]
    fn rejects_wrong_patch_side() {
        let mut data = tiny_data(1);
        data.train[0].0 = Volume::filled([8; 3], 1.0).unwrap();
        assert!(train_run(&data, tiny_model(), &TrainConfig::default()).is_err());
    }

    #[test]
    fn log_line_format() {
        let m = EpochMetrics {
            epoch: 3,
            lr: 2e-4,
            loss_d: 1.25,
            loss_g_adv: 0.5,
            l1: 0.125,
            val_psnr: 30.0,
        };
        assert_eq!(m.to_line(), "3\t0.0002\t1.25\t0.5\t0.125\t30");
    }
}
