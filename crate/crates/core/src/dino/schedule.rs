use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub teacher_temp_start: f64,
    pub teacher_temp_end: f64,
    pub teacher_temp_warmup: u64,
    pub student_temp: f64,
    pub momentum_start: f64,
    pub momentum_end: f64,
    pub weight_decay: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            min_lr: 1e-6,
            warmup_steps: 495_000,
            total_steps: 1_000_000,
            teacher_temp_start: 0.04,
            teacher_temp_end: 0.07,
            teacher_temp_warmup: 186_000,
            student_temp: 0.1,
            momentum_start: 0.992,
            momentum_end: 1.0,
            weight_decay: 0.04,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScheduleState {
    pub step: u64,
    pub lr: f64,
    pub teacher_temp: f64,
    pub student_temp: f64,
    pub momentum: f64,
}

impl ScheduleConfig {
    /// Linear warmup from 0 to `base_lr`, then cosine decay to `min_lr`.
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.base_lr;
        }
        let t = ((step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64).min(1.0);
        self.base_lr - (self.base_lr - self.min_lr) * 0.5 * (1.0 - (PI * t).cos())
    }

    pub fn teacher_temp(&self, step: u64) -> f64 {
        if step >= self.teacher_temp_warmup {
            return self.teacher_temp_end;
        }
        let f = step as f64 / self.teacher_temp_warmup as f64;
        self.teacher_temp_start + (self.teacher_temp_end - self.teacher_temp_start) * f
    }

    /// Cosine increase of the EMA momentum over the whole run.
    pub fn momentum(&self, step: u64) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return self.momentum_end;
        }
        let t = step as f64 / self.total_steps as f64;
        self.momentum_end - (self.momentum_end - self.momentum_start) * 0.5 * (1.0 + (PI * t).cos())
    }

    pub fn at(&self, step: u64) -> ScheduleState {
        ScheduleState {
            step,
            lr: self.lr(step),
            teacher_temp: self.teacher_temp(step),
            student_temp: self.student_temp,
            momentum: self.momentum(step),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.teacher_temp_start > 0.0 && self.teacher_temp_end > 0.0 && self.student_temp > 0.0) {
            return Err("temperatures must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.momentum_start) || !(0.0..=1.0).contains(&self.momentum_end) {
            return Err("momentum must lie in [0, 1]".into());
        }
        if self.base_lr < 0.0 || self.min_lr < 0.0 {
            return Err("learning rates must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn published_endpoints_exact() {
        let s = ScheduleConfig::default();
        assert_eq!(s.teacher_temp(0), 0.04);
        assert_eq!(s.teacher_temp(186_000), 0.07);
        assert_eq!(s.teacher_temp(10_000_000), 0.07);
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(495_000), s.base_lr);
        assert_eq!(s.student_temp, 0.1);
    }

    #[test]
    fn lr_reaches_min_and_momentum_endpoints() {
        let s = ScheduleConfig::default();
        assert!((s.lr(s.total_steps) - s.min_lr).abs() < 1e-18);
        assert_eq!(s.lr(s.total_steps + 5), s.lr(s.total_steps));
        assert!((s.momentum(0) - 0.992).abs() < 1e-15);
        assert_eq!(s.momentum(s.total_steps), 1.0);
    }

    #[test]
    fn short_run_without_warmup() {
        let s = ScheduleConfig {
            warmup_steps: 0,
            total_steps: 0,
            ..ScheduleConfig::default()
        };
        assert_eq!(s.lr(0), s.base_lr);
        assert_eq!(s.lr(7), s.base_lr);
    }

    proptest! {
        #[test]
        fn schedules_stay_in_range(step in 0u64..2_000_000) {
            let s = ScheduleConfig::default();
            let t = s.teacher_temp(step);
            prop_assert!((0.04..=0.07).contains(&t));
            let m = s.momentum(step);
            prop_assert!((0.992..=1.0).contains(&m));
            let lr = s.lr(step);
            prop_assert!(lr >= 0.0 && lr <= s.base_lr);
        }

        #[test]
        fn warmup_is_monotone(a in 0u64..495_000, b in 0u64..495_000) {
            let s = ScheduleConfig::default();
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(s.lr(lo) <= s.lr(hi));
            prop_assert!(s.teacher_temp(lo.min(186_000)) <= s.teacher_temp(hi.min(186_000)));
        }
    }
}
