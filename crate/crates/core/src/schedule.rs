//! Local-epoch schedules: a fixed `E`, or the decaying
//! `E_t = ⌈E_0 · γ^⌊t / F⌋⌉`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ESchedule {
    Fixed { epochs: u32 },
    Decay { e0: u32, gamma: f64, freq: u32 },
}

impl ESchedule {
    pub fn fixed(epochs: u32) -> Self {
        ESchedule::Fixed { epochs }
    }

    pub fn decay(e0: u32, gamma: f64, freq: u32) -> Result<Self> {
        let s = ESchedule::Decay { e0, gamma, freq };
        s.validate()?;
        Ok(s)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        match *self {
            ESchedule::Fixed { epochs } => {
                if epochs == 0 {
                    out.push("schedule.fixed_e must be at least 1".into());
                }
            }
            ESchedule::Decay { e0, gamma, freq } => {
                if e0 == 0 {
                    out.push("schedule.e0 must be at least 1".into());
                }
                if !(gamma > 0.0 && gamma <= 1.0) {
                    out.push(format!("schedule.gamma_e must be in (0, 1], got {gamma}"));
                }
                if freq == 0 {
                    out.push("schedule.freq_e must be at least 1".into());
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }

    pub fn is_dynamic(&self) -> bool {
        matches!(self, ESchedule::Decay { gamma, .. } if *gamma < 1.0)
    }
}

/// Local epochs for round `t`.
pub fn epochs_for_round(t: u64, sched: &ESchedule) -> u32 {
    match *sched {
        ESchedule::Fixed { epochs } => epochs.max(1),
        ESchedule::Decay { e0, gamma, freq } => {
            let decays = t / u64::from(freq.max(1));
            let mut e = f64::from(e0);
            for _ in 0..decays {
                e *= gamma;
                if e < 1.0 {
                    break;
                }
            }
            // Rounding error can lift an exact integer just above itself
            // (100 · 0.55 = 55.00000000000001); the tolerance keeps the
            // ceiling at 55.
            let ceiled = (e - 1e-9).ceil();
            (ceiled as u32).max(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn paper_schedule_values() {
        let s = ESchedule::decay(50, 0.5, 5).unwrap();
        let at = |t| epochs_for_round(t, &s);
        for t in 0..5 {
            assert_eq!(at(t), 50);
        }
        for t in 5..10 {
            assert_eq!(at(t), 25);
        }
        assert_eq!(at(10), 13);
        assert_eq!(at(15), 7);
        assert_eq!(at(20), 4);
        assert_eq!(at(25), 2);
        assert_eq!(at(30), 1);
        assert_eq!(at(10_000), 1);
    }

    #[test]
    fn degenerate_schedules() {
        let flat = ESchedule::decay(7, 1.0, 3).unwrap();
        assert!((0..100).all(|t| epochs_for_round(t, &flat) == 7));
        let one = ESchedule::decay(1, 0.3, 1).unwrap();
        assert!((0..100).all(|t| epochs_for_round(t, &one) == 1));
        assert!((0..10).all(|t| epochs_for_round(t, &ESchedule::fixed(20)) == 20));
        assert!(!flat.is_dynamic());
    }

    #[test]
    fn exact_products_do_not_round_up() {
        // 100 · 0.55 evaluates to 55.00000000000001.
        let s = ESchedule::decay(100, 0.55, 1).unwrap();
        assert_eq!(epochs_for_round(1, &s), 55);
        let s = ESchedule::decay(180, 0.55, 1).unwrap();
        assert_eq!(epochs_for_round(1, &s), 99);
    }

    #[test]
    fn validation() {
        assert!(ESchedule::decay(0, 0.5, 1).is_err());
        assert!(ESchedule::decay(5, 0.0, 1).is_err());
        assert!(ESchedule::decay(5, 1.5, 1).is_err());
        assert!(ESchedule::decay(5, 0.5, 0).is_err());
        assert!(ESchedule::fixed(0).validate().is_err());
    }

    proptest! {
        #[test]
        fn monotone_blockwise_and_positive(
            e0 in 1u32..200, gamma in 0.01f64..=1.0, freq in 1u32..10,
        ) {
            let s = ESchedule::decay(e0, gamma, freq).unwrap();
            let mut prev = u32::MAX;
            for t in 0..300u64 {
                let e = epochs_for_round(t, &s);
                prop_assert!(e >= 1);
                prop_assert!(e <= prev);
                if t % u64::from(freq) != 0 {
                    prop_assert_eq!(e, prev);
                }
                prev = e;
            }
        }
    }
}
