//! Virtual time. All simulator times are integer microseconds.

use std::fmt;

/// Absolute virtual time in microseconds since simulation start.
pub type SimTime = u64;
/// A non-negative span of virtual time in microseconds.
pub type Micros = u64;

pub const MICROS_PER_MS: u64 = 1_000;
pub const MICROS_PER_SEC: u64 = 1_000_000;

pub const fn ms(v: u64) -> Micros {
    v * MICROS_PER_MS
}

pub const fn secs(v: u64) -> Micros {
    v * MICROS_PER_SEC
}

/// Converts fractional seconds to microseconds, rounding to nearest.
pub fn secs_f64(v: f64) -> Micros {
    assert!(v >= 0.0 && v.is_finite(), "negative or non-finite duration {v}");
    (v * MICROS_PER_SEC as f64).round() as Micros
}

pub fn ms_f64(v: f64) -> Micros {
    assert!(v >= 0.0 && v.is_finite(), "negative or non-finite duration {v}");
    (v * MICROS_PER_MS as f64).round() as Micros
}

pub fn to_secs(v: Micros) -> f64 {
    v as f64 / MICROS_PER_SEC as f64
}

pub fn to_ms(v: Micros) -> f64 {
    v as f64 / MICROS_PER_MS as f64
}

/// Signed SLO slack in microseconds. [`Slack::INFINITE`] means no constraint.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Slack(pub i64);

impl Slack {
    pub const INFINITE: Slack = Slack(i64::MAX);

    pub fn is_infinite(self) -> bool {
        self == Self::INFINITE
    }

    /// Whether work of `cost` plus `margin` fits inside this slack.
    pub fn fits(self, cost: Micros, margin: Micros) -> bool {
        if self.is_infinite() {
            return true;
        }
        (cost as i128 + margin as i128) <= self.0 as i128
    }

    /// Slack remaining after `elapsed` more time has passed.
    pub fn consumed(self, elapsed: Micros) -> Slack {
        if self.is_infinite() {
            self
        } else {
            Slack(self.0.saturating_sub(elapsed.min(i64::MAX as u64) as i64))
        }
    }
}

impl fmt::Display for Slack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            write!(f, "+inf")
        } else {
            write!(f, "{}us", self.0)
        }
    }
}
