use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Neg};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A reward carried with exactly three fractional digits.
///
/// Stored as an integer count of thousandths so sums reconcile exactly. On the
/// wire it is a JSON number; decoding rejects values needing more precision.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Reward(i64);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("reward {0} is not finite")]
    NotFinite(f64),
    #[error("reward {0} has more than three fractional digits")]
    TooPrecise(f64),
    #[error("reward {0} is out of range")]
    OutOfRange(f64),
}

impl Reward {
    pub const ZERO: Reward = Reward(0);
    pub const ONE: Reward = Reward(1000);
    pub const MINUS_ONE: Reward = Reward(-1000);

    pub const fn from_milli(milli: i64) -> Self {
        Reward(milli)
    }

    pub const fn from_int(units: i64) -> Self {
        Reward(units * 1000)
    }

    pub const fn milli(self) -> i64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn try_from_f64(value: f64) -> Result<Self, RewardError> {
        if !value.is_finite() {
            return Err(RewardError::NotFinite(value));
        }
        let scaled = value * 1000.0;
        if scaled.abs() > 9.0e15 {
            return Err(RewardError::OutOfRange(value));
        }
        let rounded = scaled.round();
        if (scaled - rounded).abs() > 1e-6 {
            return Err(RewardError::TooPrecise(value));
        }
        Ok(Reward(rounded as i64))
    }
}

impl fmt::Display for Reward {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:03}", abs / 1000, abs % 1000)
    }
}

impl Add for Reward {
    type Output = Reward;
    fn add(self, rhs: Reward) -> Reward {
        Reward(self.0 + rhs.0)
    }
}

impl AddAssign for Reward {
    fn add_assign(&mut self, rhs: Reward) {
        self.0 += rhs.0;
    }
}

impl Neg for Reward {
    type Output = Reward;
    fn neg(self) -> Reward {
        Reward(-self.0)
    }
}

impl Sum for Reward {
    fn sum<I: Iterator<Item = Reward>>(iter: I) -> Reward {
        iter.fold(Reward::ZERO, Add::add)
    }
}

impl Serialize for Reward {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Reward {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = f64::deserialize(deserializer)?;
        Reward::try_from_f64(value).map_err(serde::de::Error::custom)
    }
}
