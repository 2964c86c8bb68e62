//! Fixed-point rates and id newtypes shared by every module.
//!
//! Rates are stored as integer multiples of 0.1 Mbps so that bandwidth
//! ledgers balance bit-exactly under arbitrary add/remove sequences.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, Sub, SubAssign};

/// A transmission rate in tenths of Mbps (0.1 Mbps granularity).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Rate(i64);

impl Rate {
    pub const ZERO: Rate = Rate(0);

    /// Construct from tenths of Mbps.
    pub const fn from_tenths(tenths: i64) -> Rate {
        Rate(tenths)
    }

    /// Construct from Mbps, rounding to the nearest 0.1 Mbps.
    pub fn from_mbps(mbps: f64) -> Rate {
        Rate((mbps * 10.0).round() as i64)
    }

    pub const fn tenths(self) -> i64 {
        self.0
    }

    pub fn as_mbps(self) -> f64 {
        self.0 as f64 / 10.0
    }

    pub const fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub const fn is_positive(self) -> bool {
        self.0 > 0
    }

    pub fn min(self, other: Rate) -> Rate {
        Rate(self.0.min(other.0))
    }
}

impl Add for Rate {
    type Output = Rate;
    fn add(self, rhs: Rate) -> Rate {
        Rate(self.0 + rhs.0)
    }
}

impl Sub for Rate {
    type Output = Rate;
    fn sub(self, rhs: Rate) -> Rate {
        Rate(self.0 - rhs.0)
    }
}

impl AddAssign for Rate {
    fn add_assign(&mut self, rhs: Rate) {
        self.0 += rhs.0;
    }
}

impl SubAssign for Rate {
    fn sub_assign(&mut self, rhs: Rate) {
        self.0 -= rhs.0;
    }
}

/// Weighting by a hop count, used by the congestion metric and Z costs.
impl Mul<u32> for Rate {
    type Output = i64;
    fn mul(self, hops: u32) -> i64 {
        self.0 * i64::from(hops)
    }
}

impl Sum for Rate {
    fn sum<I: Iterator<Item = Rate>>(iter: I) -> Rate {
        Rate(iter.map(|r| r.0).sum())
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.0 / 10, (self.0 % 10).abs())
    }
}

/// Index of a node (OSS or peer) in the world's node table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Zero-based content index; rendered one-based at text boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContentId(pub usize);

impl ContentId {
    /// One-based label used in configs and snapshots.
    pub fn label(self) -> usize {
        self.0 + 1
    }
}

/// One-based autonomous-system id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AsId(pub u32);

impl fmt::Display for AsId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
