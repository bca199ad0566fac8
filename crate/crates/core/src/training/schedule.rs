use super::losses::GanLoss;
use super::optim::AdamConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    /// Epochs held at `lr_init` before the linear decay to zero.
    pub lr_plateau_epochs: usize,
    pub lambda: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub gan_loss: GanLoss,
    /// When false the discriminator is never trained or consulted and the
    /// generator regresses on `lambda * l1` alone.
    pub adversarial: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 4,
            lr_init: 2e-4,
            lr_plateau_epochs: 50,
            lambda: 100.0,
            adam: AdamConfig::default(),
            seed: 0,
            gan_loss: GanLoss::NonSaturating,
            adversarial: true,
        }
    }
}

impl TrainConfig {
    /// Twenty epochs with the plateau kept at a third of the run.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 20,
            lr_plateau_epochs: plateau_for(20),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return Err(Error::contract(format!("initial learning rate {} must be positive", self.lr_init)));
        }
        if self.lr_plateau_epochs > self.epochs {
            return Err(Error::contract(format!(
                "plateau of {} epochs exceeds the {} training epochs",
                self.lr_plateau_epochs, self.epochs
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::contract(format!("lambda {} must be nonnegative", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::contract("adam betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

/// Plateau length keeping the 50-of-150 proportion: `round(epochs / 3)`.
pub fn plateau_for(epochs: usize) -> usize {
    (epochs + 1) / 3
}

/// `lr_init` before the plateau ends, then linear to 0 at `epochs`.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.epochs {
        return Err(Error::contract(format!(
            "epoch {epoch} is past the end of a {}-epoch run",
            cfg.epochs
        )));
    }
    if epoch < cfg.lr_plateau_epochs {
        return Ok(cfg.lr_init);
    }
    if epoch == cfg.epochs {
        return Ok(0.0);
    }
    let remaining = (cfg.epochs - epoch) as f64;
    let span = (cfg.epochs - cfg.lr_plateau_epochs) as f64;
    Ok(cfg.lr_init * (remaining / span))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spot_values() {
        let c = TrainConfig::default();
        assert_eq!(lr_at_epoch(10, &c).unwrap(), 2e-4);
        assert_eq!(lr_at_epoch(50, &c).unwrap(), 2e-4);
        assert_eq!(lr_at_epoch(100, &c).unwrap(), 1e-4);
        assert_eq!(lr_at_epoch(150, &c).unwrap(), 0.0);
        assert!(lr_at_epoch(151, &c).is_err());
    }

    #[test]
    fn desk_plateau() {
        assert_eq!(plateau_for(150), 50);
        assert_eq!(TrainConfig::desk().lr_plateau_epochs, 7);
        TrainConfig::desk().validate().unwrap();
    }

    #[test]
    fn whole_run_plateau() {
        let c = TrainConfig {
            epochs: 5,
            lr_plateau_epochs: 5,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at_epoch(4, &c).unwrap(), 2e-4);
        assert_eq!(lr_at_epoch(5, &c).unwrap(), 0.0);
    }

    #[test]
    fn rejects_invalid() {
        let mut c = TrainConfig::default();
        c.lr_plateau_epochs = 151;
        assert!(c.validate().is_err());
        c = TrainConfig::default();
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        c = TrainConfig::default();
        c.lr_init = 0.0;
        assert!(c.validate().is_err());
    }
}
