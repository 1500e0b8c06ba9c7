//! Auxiliary-task selection and learning-rate schedules.

pub const DEFAULT_LR_INTERVAL: usize = 2500;

/// `p0 · 0.9^⌊n·t/T⌋` for `n` decay steps.
pub fn aux_probability(t: usize, total: usize, p0: f64, decay_steps: usize) -> f64 {
    assert!(total > 0, "total steps must be positive");
    let i = (decay_steps as u128 * t as u128 / total as u128) as i32;
    p0 * 0.9f64.powi(i)
}

/// Step schedule: `lr0` for the first half of training, then divided by 10
/// three times, `interval` steps apart.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub interval: usize,
}

impl LrSchedule {
    /// Index of the plateau containing step `t` (0..=3).
    pub fn plateau(&self, t: usize, total: usize) -> usize {
        if 2 * t < total {
            return 0;
        }
        let half = total.div_ceil(2);
        (1 + (t - half) / self.interval).min(3)
    }

    pub fn at(&self, t: usize, total: usize) -> f64 {
        self.lr0 / [1.0, 10.0, 100.0, 1000.0][self.plateau(t, total)]
    }
}

pub fn learning_rate(t: usize, total: usize, lr0: f64) -> f64 {
    LrSchedule { lr0, interval: DEFAULT_LR_INTERVAL }.at(t, total)
}
