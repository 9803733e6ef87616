//! Non-pharmaceutical intervention levels.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Number of containment NPIs tracked per day.
pub const NPI_COUNT: usize = 8;

/// Maximum stringency level for C1..C8, in order.
pub const NPI_MAX_LEVELS: [u8; NPI_COUNT] = [3, 3, 2, 4, 2, 3, 2, 4];

/// Column names used by the response-tracker CSV for C1..C8.
pub const NPI_COLUMNS: [&str; NPI_COUNT] = [
    "C1_School closing",
    "C2_Workplace closing",
    "C3_Cancel public events",
    "C4_Restrictions on gatherings",
    "C5_Close public transport",
    "C6_Stay at home requirements",
    "C7_Restrictions on internal movement",
    "C8_International travel controls",
];

/// Sum of all per-NPI maxima.
pub const MAX_STRINGENCY: u32 = 23;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelOutOfRange {
    pub npi: usize,
    pub level: u8,
}

impl fmt::Display for LevelOutOfRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "C{} level {} exceeds maximum {}",
            self.npi + 1,
            self.level,
            NPI_MAX_LEVELS[self.npi]
        )
    }
}

impl std::error::Error for LevelOutOfRange {}

/// Stringency levels for the eight NPIs on a single day, C1 first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "[u8; NPI_COUNT]", into = "[u8; NPI_COUNT]")]
pub struct NpiVector([u8; NPI_COUNT]);

impl NpiVector {
    pub const ZERO: NpiVector = NpiVector([0; NPI_COUNT]);
    pub const MAX: NpiVector = NpiVector(NPI_MAX_LEVELS);

    pub fn new(levels: [u8; NPI_COUNT]) -> Result<Self, LevelOutOfRange> {
        for (npi, (&level, &max)) in levels.iter().zip(NPI_MAX_LEVELS.iter()).enumerate() {
            if level > max {
                return Err(LevelOutOfRange { npi, level });
            }
        }
        Ok(Self(levels))
    }

    /// Builds a vector by clamping every level into its valid range.
    pub fn saturating(levels: [i64; NPI_COUNT]) -> Self {
        let mut out = [0u8; NPI_COUNT];
        for i in 0..NPI_COUNT {
            out[i] = levels[i].clamp(0, NPI_MAX_LEVELS[i] as i64) as u8;
        }
        Self(out)
    }

    pub fn levels(&self) -> &[u8; NPI_COUNT] {
        &self.0
    }

    pub fn get(&self, npi: usize) -> u8 {
        self.0[npi]
    }

    pub fn set(&mut self, npi: usize, level: u8) -> Result<(), LevelOutOfRange> {
        if level > NPI_MAX_LEVELS[npi] {
            return Err(LevelOutOfRange { npi, level });
        }
        self.0[npi] = level;
        Ok(())
    }

    /// Total stringency, the sum of all eight levels (0..=23).
    pub fn stringency(&self) -> u32 {
        self.0.iter().map(|&l| l as u32).sum()
    }

    /// Levels divided by their maxima, each in [0, 1].
    pub fn normalized(&self) -> [f64; NPI_COUNT] {
        let mut out = [0.0; NPI_COUNT];
        for i in 0..NPI_COUNT {
            out[i] = self.0[i] as f64 / NPI_MAX_LEVELS[i] as f64;
        }
        out
    }

    /// True when every level is at least the corresponding level of `other`.
    pub fn dominates_levels(&self, other: &NpiVector) -> bool {
        self.0.iter().zip(other.0.iter()).all(|(a, b)| a >= b)
    }
}

impl TryFrom<[u8; NPI_COUNT]> for NpiVector {
    type Error = LevelOutOfRange;

    fn try_from(levels: [u8; NPI_COUNT]) -> Result<Self, Self::Error> {
        Self::new(levels)
    }
}

impl From<NpiVector> for [u8; NPI_COUNT] {
    fn from(v: NpiVector) -> Self {
        v.0
    }
}
