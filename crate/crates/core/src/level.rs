use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of ordinal grades.
pub const NUM_LEVELS: usize = 4;

/// Ordinal tortuosity grade, 1 (mildest) through 4 (most severe).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub struct Level(u8);

impl Level {
    pub const ALL: [Level; NUM_LEVELS] = [Level(1), Level(2), Level(3), Level(4)];

    pub fn new(value: i64) -> Result<Self> {
        if (1..=NUM_LEVELS as i64).contains(&value) {
            Ok(Level(value as u8))
        } else {
            Err(Error::Level(value))
        }
    }

    /// Builds a level from a zero-based class index.
    pub fn from_index(index: usize) -> Result<Self> {
        Self::new(index as i64 + 1)
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based class index.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }
}

impl TryFrom<i64> for Level {
    type Error = Error;

    fn try_from(value: i64) -> Result<Self> {
        Level::new(value)
    }
}

impl From<Level> for u8 {
    fn from(l: Level) -> u8 {
        l.0
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_is_enforced() {
        assert!(Level::new(0).is_err());
        assert!(Level::new(5).is_err());
        assert_eq!(Level::new(3).unwrap().index(), 2);
        assert_eq!(Level::from_index(0).unwrap().get(), 1);
    }
}
