//! Reduce-on-plateau learning-rate rule driven by the training loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    /// A loss counts as an improvement when it is below `best - threshold`.
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.1,
            patience: 5,
            threshold: 1e-4,
        }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Config(format!("plateau factor {} not in (0, 1)", self.factor)));
        }
        if self.patience == 0 {
            return Err(Error::Config("plateau patience must be positive".into()));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::Config("plateau threshold must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    config: PlateauConfig,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, config: PlateauConfig) -> Result<Self> {
        config.validate()?;
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate {lr} must be positive")));
        }
        Ok(PlateauScheduler {
            config,
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records the loss of the epoch just finished and returns the rate for the next one.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.config.threshold {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.config.patience {
                self.lr *= self.config.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn drops_after_five_flat_epochs() {
        let mut s = PlateauScheduler::new(1e-3, PlateauConfig::default()).unwrap();
        // Epoch 1 sets the baseline, epochs 2..=6 do not improve.
        let mut lrs = vec![s.lr()];
        for loss in [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0] {
            lrs.push(s.step(loss));
        }
        // lrs[e] is the rate used in epoch e + 1.
        assert_eq!(&lrs[..6], &[1e-3; 6]);
        assert!((lrs[6] - 1e-4).abs() < 1e-18);
        assert!((lrs[7] - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn small_gains_are_not_improvements() {
        let mut s = PlateauScheduler::new(1.0, PlateauConfig::default()).unwrap();
        s.step(1.0);
        for k in 1..=5 {
            s.step(1.0 - 0.5e-4 * k as f64 / 5.0);
        }
        assert!((s.lr() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(PlateauScheduler::new(1e-3, PlateauConfig { factor: 1.0, ..Default::default() }).is_err());
        assert!(PlateauScheduler::new(0.0, PlateauConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn lr_non_increasing_and_drops_are_exact(losses in prop::collection::vec(0.0f64..2.0, 1..60)) {
            let mut s = PlateauScheduler::new(1e-3, PlateauConfig::default()).unwrap();
            let mut prev = s.lr();
            for l in losses {
                let lr = s.step(l);
                prop_assert!(lr <= prev);
                if lr < prev {
                    prop_assert!((lr / prev - 0.1).abs() < 1e-12);
                }
                prev = lr;
            }
        }
    }
}
