//! Masking-rate, selection-noise and temperature schedules.
//!
//! Time runs from `T` (everything masked) down to `0` (nothing masked).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Slack subtracted before rounding up, so `ceil(3.0000000000000004)` is 3.
const CEIL_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaKind {
    Cosine,
    Linear,
}

impl GammaKind {
    /// Fraction of masked positions at normalized time `u`.
    pub fn gamma(self, u: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&u) {
            return Err(invalid("schedule time", format!("{u} is outside [0, 1]")));
        }
        Ok(match self {
            GammaKind::Cosine => (std::f64::consts::FRAC_PI_2 * u).sin(),
            GammaKind::Linear => u,
        })
    }

    /// Inverse of `gamma` on [0, 1].
    pub fn inverse(self, y: f64) -> f64 {
        match self {
            GammaKind::Cosine => y.clamp(0.0, 1.0).asin() / std::f64::consts::FRAC_PI_2,
            GammaKind::Linear => y.clamp(0.0, 1.0),
        }
    }
}

pub(crate) fn ceil_count(x: f64, n: usize) -> usize {
    ((x - CEIL_SLACK).ceil().max(0.0) as usize).min(n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub total_steps: usize,
    pub gamma: GammaKind,
    /// Scale of the uniform selection noise.
    pub noise_scale: f64,
    /// Temperature slope `a` in `a·(t/T) + b`.
    pub temp_slope: f64,
    /// Temperature intercept `b`.
    pub temp_intercept: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            total_steps: 6,
            gamma: GammaKind::Cosine,
            noise_scale: 2.0,
            temp_slope: 1.0,
            temp_intercept: 0.5,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(invalid("steps", "must be at least 1"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(invalid("noise_scale", "must be nonnegative"));
        }
        if !(self.temp_intercept > 0.0) {
            return Err(invalid("temp_intercept", "must be positive"));
        }
        if !(self.temp_slope + self.temp_intercept > 0.0) {
            return Err(invalid("temp_slope", "slope + intercept must be positive"));
        }
        Ok(())
    }

    pub fn with_steps(&self, steps: usize) -> Schedule {
        Schedule {
            total_steps: steps,
            ..self.clone()
        }
    }

    pub fn gamma(&self, u: f64) -> Result<f64> {
        self.gamma.gamma(u)
    }

    fn fraction(&self, t: usize) -> f64 {
        t.min(self.total_steps) as f64 / self.total_steps as f64
    }

    /// `ceil(gamma(t/T)·n)`, clamped to `[0, n]`.
    pub fn mask_count(&self, t: usize, n: usize) -> usize {
        let g = self.gamma.gamma(self.fraction(t)).unwrap_or(1.0);
        ceil_count(g * n as f64, n)
    }

    /// Masked counts for a refinement pass of `self.total_steps` steps that
    /// starts from `ceil(ratio·n)` and decays along the same curve.
    pub fn refine_count(&self, t: usize, ratio: f64, n: usize) -> usize {
        let g = self.gamma.gamma(self.fraction(t)).unwrap_or(1.0);
        ceil_count(g * ratio * n as f64, n)
    }

    /// Uniform noise in `±noise_scale·(t/T)/2`; always draws `n` numbers.
    pub fn selection_noise<R: Rng + ?Sized>(&self, t: usize, n: usize, rng: &mut R) -> Vec<f64> {
        let amp = self.noise_scale * self.fraction(t);
        (0..n).map(|_| amp * (rng.gen::<f64>() - 0.5)).collect()
    }

    /// `a·(t/T) + b`.
    pub fn temperature(&self, t: usize) -> Result<f64> {
        let temp = self.temp_slope * self.fraction(t) + self.temp_intercept;
        if !(temp > 0.0) {
            return Err(invalid("temperature", format!("{temp} is not positive at t = {t}")));
        }
        Ok(temp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn cosine_gamma_values() {
        let g = GammaKind::Cosine;
        assert_eq!(g.gamma(0.0).unwrap(), 0.0);
        assert_eq!(g.gamma(1.0).unwrap(), 1.0);
        assert!((g.gamma(0.5).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(g.gamma(1.5).is_err());
        assert!(g.gamma(-0.1).is_err());
    }

    #[test]
    fn mask_count_values() {
        let s = Schedule {
            total_steps: 10,
            ..Default::default()
        };
        assert_eq!(s.mask_count(0, 9), 0);
        assert_eq!(s.mask_count(10, 9), 9);
        assert_eq!(s.mask_count(5, 9), 7);
    }

    #[test]
    fn linear_schedule_over_n_steps_reveals_one_per_step() {
        for n in 1..40 {
            let s = Schedule {
                total_steps: n,
                gamma: GammaKind::Linear,
                ..Default::default()
            };
            for t in 0..=n {
                assert_eq!(s.mask_count(t, n), t);
            }
        }
    }

    #[test]
    fn selection_noise_range() {
        let s = Schedule {
            total_steps: 8,
            noise_scale: 1.0,
            ..Default::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        assert!(s.selection_noise(0, 9, &mut rng).iter().all(|&v| v == 0.0));
        let zero = Schedule {
            noise_scale: 0.0,
            ..s.clone()
        };
        assert!(zero.selection_noise(8, 9, &mut rng).iter().all(|&v| v == 0.0));
        let draws = s.selection_noise(8, 100_000, &mut rng);
        assert!(draws.iter().all(|v| (-0.5..=0.5).contains(v)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.005);
    }

    #[test]
    fn temperature_values() {
        let s = Schedule {
            total_steps: 4,
            temp_slope: 1.0,
            temp_intercept: 0.5,
            ..Default::default()
        };
        assert_eq!(s.temperature(0).unwrap(), 0.5);
        assert_eq!(s.temperature(4).unwrap(), 1.5);
        assert_eq!(s.temperature(2).unwrap(), 1.0);
        let bad = Schedule {
            temp_slope: -1.0,
            temp_intercept: 0.5,
            ..s
        };
        assert!(bad.temperature(4).is_err());
        assert!(bad.validate().is_err());
    }

    #[test]
    fn refinement_starts_at_ratio() {
        let s = Schedule {
            total_steps: 9,
            ..Default::default()
        };
        assert_eq!(s.refine_count(9, 0.6, 9), 6);
        assert_eq!(s.refine_count(9, 0.6, 256), 154);
        assert_eq!(s.refine_count(0, 0.6, 9), 0);
    }

    proptest! {
        #[test]
        fn mask_count_monotone(steps in 1usize..40, n in 1usize..300) {
            let s = Schedule { total_steps: steps, ..Default::default() };
            prop_assert_eq!(s.mask_count(0, n), 0);
            prop_assert_eq!(s.mask_count(steps, n), n);
            for t in 1..=steps {
                prop_assert!(s.mask_count(t, n) >= s.mask_count(t - 1, n));
            }
        }

        #[test]
        fn gamma_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for g in [GammaKind::Cosine, GammaKind::Linear] {
                prop_assert!(g.gamma(lo).unwrap() <= g.gamma(hi).unwrap());
            }
        }
    }
}
