//! Cosine annealing with warm restarts, stepped once per epoch.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    /// Length in epochs of the first cycle.
    pub t0: usize,
    /// Cycle length multiplier applied after every restart.
    pub t_mult: usize,
    pub total_cycles: usize,
}

impl Default for RestartSchedule {
    fn default() -> Self {
        Self { eta_max: 0.5, eta_min: 0.005, t0: 8, t_mult: 2, total_cycles: 2 }
    }
}

impl RestartSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_min > 0.0 && self.eta_min < self.eta_max && self.eta_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < eta_min < eta_max, got {} / {}",
                self.eta_min, self.eta_max
            )));
        }
        if self.t0 == 0 || self.t_mult == 0 {
            return Err(Error::InvalidArgument("t0 and t_mult must be positive".into()));
        }
        Ok(())
    }

    /// Sum of all cycle lengths.
    pub fn total_epochs(&self) -> usize {
        (0..self.total_cycles).map(|i| self.t0 * self.t_mult.pow(i as u32)).sum()
    }

    /// `(T_cur, T_i)` for `epoch`; cycles keep growing past `total_cycles`.
    pub fn position(&self, epoch: usize) -> (usize, usize) {
        let mut start = 0;
        let mut len = self.t0;
        while epoch >= start + len {
            start += len;
            len *= self.t_mult;
        }
        (epoch - start, len)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let (t_cur, t_i) = self.position(epoch);
        let phase = PI * t_cur as f64 / t_i as f64;
        self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + phase.cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sgdr() -> RestartSchedule {
        RestartSchedule { eta_max: 0.1, eta_min: 0.001, t0: 10, t_mult: 2, total_cycles: 3 }
    }

    #[test]
    fn restarts_and_midpoints() {
        let s = sgdr();
        assert_eq!(s.lr_at(0), 0.1);
        assert!((s.lr_at(5) - 0.0505).abs() < 1e-15);
        assert_eq!(s.lr_at(10), 0.1);
        assert!((s.lr_at(20) - 0.0505).abs() < 1e-15);
        assert_eq!(s.lr_at(30), 0.1);
        assert_eq!(s.total_epochs(), 70);
        assert!(s.lr_at(9) < 0.004 && s.lr_at(9) > 0.001);
    }

    #[test]
    fn constant_cycle_length() {
        let s = RestartSchedule { t_mult: 1, t0: 4, ..sgdr() };
        assert_eq!(s.position(9), (1, 4));
        assert_eq!(s.total_epochs(), 12);
    }

    #[test]
    fn validation() {
        assert!(sgdr().validate().is_ok());
        assert!(RestartSchedule { eta_min: 0.2, ..sgdr() }.validate().is_err());
        assert!(RestartSchedule { t0: 0, ..sgdr() }.validate().is_err());
    }
}
