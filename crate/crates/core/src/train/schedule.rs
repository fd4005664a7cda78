//! Annealed reduction factor: start large, step down to a floor.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RFSchedule {
    pub initial_r: usize,
    pub step_every: usize,
    pub floor_r: usize,
}

impl RFSchedule {
    /// 5 down to 2, one step every 200 epochs.
    pub fn full_scale() -> Self {
        Self {
            initial_r: 5,
            step_every: 200,
            floor_r: 2,
        }
    }

    pub fn fixed(r: usize) -> Self {
        Self {
            initial_r: r,
            step_every: 1,
            floor_r: r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.floor_r == 0 || self.initial_r < self.floor_r || self.step_every == 0 {
            return Err(Error::Config(format!(
                "schedule needs initial_r >= floor_r >= 1 and step_every >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn r_at_epoch(&self, epoch: usize) -> usize {
        self.initial_r.saturating_sub(epoch / self.step_every).max(self.floor_r)
    }

    /// Every value the schedule can produce, largest first.
    pub fn values(&self) -> Vec<usize> {
        (self.floor_r..=self.initial_r).rev().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_examples() {
        let s = RFSchedule::full_scale();
        let got: Vec<usize> = [0, 199, 200, 399, 400, 600, 2000, 10000].iter().map(|&e| s.r_at_epoch(e)).collect();
        assert_eq!(got, vec![5, 5, 4, 4, 3, 2, 2, 2]);
        assert_eq!(s.values(), vec![5, 4, 3, 2]);
    }

    #[test]
    fn fixed_never_moves() {
        let s = RFSchedule::fixed(5);
        assert!((0..3000).all(|e| s.r_at_epoch(e) == 5));
        assert!(RFSchedule { initial_r: 2, step_every: 1, floor_r: 3 }.validate().is_err());
        assert!(RFSchedule { initial_r: 2, step_every: 0, floor_r: 1 }.validate().is_err());
    }
}
