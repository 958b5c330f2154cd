//! Cosine learning-rate decay with warm restarts.
//!
//! Each cycle decays from `lr_max` to `lr_min` per iteration; cycle lengths
//! double: 2, 4, 8, … epochs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LR_MAX: f64 = 0.1;
pub const LR_MIN: f64 = 1e-4;
pub const CYCLE_EPOCHS: [usize; 7] = [2, 4, 8, 16, 32, 64, 128];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub cycle_epochs: Vec<usize>,
    pub iterations_per_epoch: usize,
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·t/T))`.
pub fn cosine_lr(lr_max: f64, lr_min: f64, t: usize, period: usize) -> f64 {
    let phase = std::f64::consts::PI * t as f64 / period as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}

impl Schedule {
    /// All seven cycles (254 epochs).
    pub fn standard(iterations_per_epoch: usize) -> Self {
        Self {
            lr_max: LR_MAX,
            lr_min: LR_MIN,
            cycle_epochs: CYCLE_EPOCHS.to_vec(),
            iterations_per_epoch,
        }
    }

    /// The shortest prefix of the standard cycles ending at `epochs`, which
    /// must be one of 2, 6, 14, 30, 62, 126, 254.
    pub fn through_epoch(epochs: usize, iterations_per_epoch: usize) -> Result<Self> {
        let mut s = Self::standard(iterations_per_epoch);
        let ends = s.cycle_ends();
        let n = ends
            .iter()
            .position(|&e| e == epochs)
            .ok_or_else(|| Error::arg(format!("{epochs} epochs is not a cycle boundary; use one of {ends:?}")))?;
        s.cycle_epochs.truncate(n + 1);
        Ok(s)
    }

    /// Cumulative epoch at which each cycle ends.
    pub fn cycle_ends(&self) -> Vec<usize> {
        self.cycle_epochs
            .iter()
            .scan(0, |acc, &e| {
                *acc += e;
                Some(*acc)
            })
            .collect()
    }

    pub fn total_epochs(&self) -> usize {
        self.cycle_epochs.iter().sum()
    }

    pub fn total_iterations(&self) -> usize {
        self.total_epochs() * self.iterations_per_epoch
    }

    /// `(cycle, t, T)` for `global_iter`; the final iteration count maps to
    /// `t = T` of the last cycle.
    pub fn position(&self, global_iter: usize) -> Result<(usize, usize, usize)> {
        if self.iterations_per_epoch == 0 || self.cycle_epochs.is_empty() {
            return Err(Error::arg("schedule has no iterations"));
        }
        let mut start = 0;
        for (i, &e) in self.cycle_epochs.iter().enumerate() {
            let len = e * self.iterations_per_epoch;
            let last = i + 1 == self.cycle_epochs.len();
            if global_iter < start + len || (last && global_iter == start + len) {
                return Ok((i, global_iter - start, len));
            }
            start += len;
        }
        Err(Error::Range(format!(
            "iteration {global_iter} beyond schedule of {} iterations",
            self.total_iterations()
        )))
    }
}

pub fn warm_restart_lr(global_iter: usize, schedule: &Schedule) -> Result<f64> {
    let (_, t, period) = schedule.position(global_iter)?;
    Ok(cosine_lr(schedule.lr_max, schedule.lr_min, t, period))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundaries_and_values() {
        let s = Schedule::standard(10);
        assert_eq!(s.cycle_ends(), vec![2, 6, 14, 30, 62, 126, 254]);
        assert_eq!(warm_restart_lr(0, &s).unwrap(), 0.1);
        assert_eq!(warm_restart_lr(20, &s).unwrap(), 0.1);
        assert!((warm_restart_lr(10, &s).unwrap() - 0.05005).abs() < 1e-15);
        assert!((warm_restart_lr(2540, &s).unwrap() - 1e-4).abs() < 1e-15);
        assert!(matches!(warm_restart_lr(2541, &s), Err(Error::Range(_))));
        assert!((cosine_lr(0.1, 1e-4, 7, 7) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn truncated_schedules() {
        let s = Schedule::through_epoch(6, 3).unwrap();
        assert_eq!(s.cycle_epochs, vec![2, 4]);
        assert_eq!(s.total_iterations(), 18);
        assert!(Schedule::through_epoch(7, 3).is_err());
    }
}
