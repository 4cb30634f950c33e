use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A calendar month encoded as `yyyymm`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(try_from = "u32", into = "u32")]
pub struct YearMonth(u32);

impl YearMonth {
    pub fn new(year: u32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) || year > 9999 {
            return Err(Error::InvalidArgument(format!("bad month {year}-{month}")));
        }
        Ok(YearMonth(year * 100 + month))
    }

    pub fn from_yyyymm(code: u32) -> Result<Self> {
        Self::new(code / 100, code % 100)
    }

    pub fn yyyymm(self) -> u32 {
        self.0
    }

    pub fn year(self) -> u32 {
        self.0 / 100
    }

    pub fn month(self) -> u32 {
        self.0 % 100
    }

    /// Months elapsed since January of year 0.
    pub fn ordinal(self) -> i64 {
        self.year() as i64 * 12 + self.month() as i64 - 1
    }

    fn from_ordinal(ordinal: i64) -> Self {
        let year = ordinal.div_euclid(12) as u32;
        let month = ordinal.rem_euclid(12) as u32 + 1;
        YearMonth(year * 100 + month)
    }

    pub fn add_months(self, delta: i64) -> Self {
        Self::from_ordinal(self.ordinal() + delta)
    }

    pub fn prev(self) -> Self {
        self.add_months(-1)
    }

    pub fn next(self) -> Self {
        self.add_months(1)
    }

    /// Signed number of months from `other` to `self`.
    pub fn months_since(self, other: YearMonth) -> i64 {
        self.ordinal() - other.ordinal()
    }

    /// Inclusive range `start..=end`; empty when `end < start`.
    pub fn range_inclusive(start: YearMonth, end: YearMonth) -> impl Iterator<Item = YearMonth> {
        (start.ordinal()..=end.ordinal()).map(Self::from_ordinal)
    }
}

impl TryFrom<u32> for YearMonth {
    type Error = Error;
    fn try_from(code: u32) -> Result<Self> {
        Self::from_yyyymm(code)
    }
}

impl From<YearMonth> for u32 {
    fn from(m: YearMonth) -> u32 {
        m.0
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:06}", self.0)
    }
}

impl FromStr for YearMonth {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let code: u32 = s
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("not a yyyymm month: {s:?}")))?;
        Self::from_yyyymm(code)
    }
}
