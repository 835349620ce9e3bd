use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Major,
    Minor,
}

/// Tonic pitch class (C = 0) and mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeyLabel {
    tonic: u8,
    mode: Mode,
}

impl KeyLabel {
    pub fn new(tonic: u8, mode: Mode) -> Result<Self, CoreError> {
        if tonic > 11 {
            return Err(CoreError::invalid(format!("tonic {tonic} out of range 0..=11")));
        }
        Ok(Self { tonic, mode })
    }

    pub fn tonic(self) -> u8 {
        self.tonic
    }

    pub fn mode(self) -> Mode {
        self.mode
    }

    /// Dense index: tonic for major keys, 12 + tonic for minor keys.
    pub fn index(self) -> usize {
        self.tonic as usize + if self.mode == Mode::Minor { 12 } else { 0 }
    }

    pub fn from_index(i: usize) -> Result<Self, CoreError> {
        match i {
            0..=11 => Self::new(i as u8, Mode::Major),
            12..=23 => Self::new((i - 12) as u8, Mode::Minor),
            _ => Err(CoreError::invalid(format!("key index {i}"))),
        }
    }
}

impl fmt::Display for KeyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            Mode::Major => "major",
            Mode::Minor => "minor",
        };
        write!(f, "{}:{mode}", self.tonic)
    }
}

impl FromStr for KeyLabel {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, CoreError> {
        let bad = || CoreError::invalid(format!("key label `{s}`, expected `tonic:mode`"));
        let (t, m) = s.trim().split_once(':').ok_or_else(bad)?;
        let tonic: u8 = t.parse().map_err(|_| bad())?;
        let mode = match m {
            "major" => Mode::Major,
            "minor" => Mode::Minor,
            _ => return Err(bad()),
        };
        KeyLabel::new(tonic, mode)
    }
}

/// Partial-credit key score: exact 1.0, fifth 0.5, relative 0.3,
/// parallel 0.2, otherwise 0. The fifth counts only when the estimate is a
/// fifth above the reference unless `bidirectional_fifth` is set.
pub fn refined_key_score(est: KeyLabel, reference: KeyLabel, bidirectional_fifth: bool) -> f64 {
    let up = (est.tonic as i32 - reference.tonic as i32).rem_euclid(12);
    if est == reference {
        1.0
    } else if est.mode == reference.mode && (up == 7 || (bidirectional_fifth && up == 5)) {
        0.5
    } else if (est.mode == Mode::Minor && reference.mode == Mode::Major && up == 9)
        || (est.mode == Mode::Major && reference.mode == Mode::Minor && up == 3)
    {
        0.3
    } else if est.tonic == reference.tonic {
        0.2
    } else {
        0.0
    }
}
