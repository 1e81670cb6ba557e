use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cyclic learning rate with snapshots at each cycle end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwaSchedule {
    /// Rate at the start of each cycle.
    pub alpha1: f64,
    /// Rate at the end of each cycle.
    pub alpha2: f64,
    /// Cycle length in epochs.
    pub cycle_len: usize,
    pub total_epochs: usize,
}

impl Default for SwaSchedule {
    fn default() -> Self {
        Self { alpha1: 0.01, alpha2: 0.0001, cycle_len: 20, total_epochs: 100 }
    }
}

impl SwaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 > self.alpha2 && self.alpha2 > 0.0) {
            return Err(Error::Config(format!(
                "need alpha1 > alpha2 > 0, got {} and {}",
                self.alpha1, self.alpha2
            )));
        }
        if self.cycle_len == 0 || self.total_epochs == 0 || !self.total_epochs.is_multiple_of(self.cycle_len) {
            return Err(Error::Config(format!(
                "total epochs ({}) must be a positive multiple of the cycle length ({})",
                self.total_epochs, self.cycle_len
            )));
        }
        Ok(())
    }

    pub fn cycles(&self) -> usize {
        self.total_epochs / self.cycle_len
    }

    /// Epochs (1-based) at which snapshots are taken.
    pub fn is_cycle_end(&self, epoch: usize) -> bool {
        epoch.is_multiple_of(self.cycle_len)
    }
}

/// `alpha_i = (1 - t_i) alpha1 + t_i alpha2` with `t_i = (mod(i - 1, c) + 1) / c`, `i >= 1`.
pub fn cyclic_lr(epoch: usize, sched: &SwaSchedule) -> f64 {
    assert!(epoch >= 1, "epochs are 1-based");
    let c = sched.cycle_len;
    let t = (((epoch - 1) % c) + 1) as f64 / c as f64;
    (1.0 - t) * sched.alpha1 + t * sched.alpha2
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_rates() {
        let s = SwaSchedule::default();
        assert_eq!(cyclic_lr(1, &s), 0.009505);
        assert_eq!(cyclic_lr(20, &s), 0.0001);
        assert_eq!(cyclic_lr(21, &s), cyclic_lr(1, &s));
        assert_eq!(s.cycles(), 5);
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(SwaSchedule { total_epochs: 30, ..Default::default() }.validate().is_err());
        assert!(SwaSchedule { alpha2: 0.1, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn rate_is_periodic_and_bounded(i in 1usize..10_000, c in 1usize..50) {
            let s = SwaSchedule { cycle_len: c, total_epochs: c, ..Default::default() };
            let a = cyclic_lr(i, &s);
            prop_assert!(a >= s.alpha2 - 1e-18 && a <= s.alpha1);
            prop_assert_eq!(a, cyclic_lr(i + c, &s));
            if i % c != 0 {
                prop_assert!(cyclic_lr(i + 1, &s) < a);
            }
        }
    }
}
