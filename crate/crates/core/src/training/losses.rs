use crate::diffcore::Var;
use crate::error::{Error, Result};
use crate::pointspace::Volume;

/// Generator adversarial objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GanLoss {
    /// Generator minimises `-log D(fake)`.
    #[default]
    NonSaturating,
    /// Generator minimises `log(1 - D(fake))`, the literal min-max form.
    MinMax,
}

/// Mean absolute voxel difference.
pub fn l1_loss(estimate: &Volume, target: &Volume) -> Result<f64> {
    estimate.same_shape(target, "l1_loss")?;
    let sum: f64 = estimate
        .voxels()
        .iter()
        .zip(target.voxels())
        .map(|(e, t)| (t - e).abs())
        .sum();
    Ok(sum / target.len() as f64)
}

pub fn l1_loss_var<'t>(estimate: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    if estimate.dims() != target.dims() {
        return Err(Error::contract(format!(
            "l1 between {:?} and {:?}",
            estimate.shape(),
            target.shape()
        )));
    }
    estimate.sub(target)?.abs()?.mean()
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::contract(format!("{name} = {p} is outside (0, 1)")));
    }
    Ok(())
}

/// `(loss_D, loss_G_adv)` with the non-saturating generator term.
pub fn gan_losses(d_real: f64, d_fake: f64) -> Result<(f64, f64)> {
    gan_losses_with(d_real, d_fake, GanLoss::NonSaturating)
}

pub fn gan_losses_with(d_real: f64, d_fake: f64, kind: GanLoss) -> Result<(f64, f64)> {
    check_probability("d_real", d_real)?;
    check_probability("d_fake", d_fake)?;
    let loss_d = -d_real.ln() - (1.0 - d_fake).ln();
    let loss_g = match kind {
        GanLoss::NonSaturating => -d_fake.ln(),
        GanLoss::MinMax => (1.0 - d_fake).ln(),
    };
    Ok((loss_d, loss_g))
}

/// `-log d_real - log(1 - d_fake)`.
pub fn discriminator_loss_var<'t>(d_real: Var<'t>, d_fake: Var<'t>) -> Result<Var<'t>> {
    let real = d_real.log()?;
    let fake = d_fake.scale(-1.0)?.shift(1.0)?.log()?;
    real.add(fake)?.scale(-1.0)
}

pub fn generator_adv_var<'t>(d_fake: Var<'t>, kind: GanLoss) -> Result<Var<'t>> {
    match kind {
        GanLoss::NonSaturating => d_fake.log()?.scale(-1.0),
        GanLoss::MinMax => d_fake.scale(-1.0)?.shift(1.0)?.log(),
    }
}

/// `adv + lambda * l1`.
pub fn total_generator_loss(adv: f64, l1: f64, lambda: f64) -> f64 {
    adv + lambda * l1
}

pub fn total_generator_loss_var<'t>(adv: Var<'t>, l1: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    adv.add(l1.scale(lambda)?)
}
