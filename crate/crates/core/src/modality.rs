use core::fmt;
use core::str::FromStr;

use crate::error::Error;

/// One imaging channel of a tri-modal sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    /// Visible light.
    R,
    /// Near infrared.
    N,
    /// Thermal infrared.
    T,
}

impl Modality {
    /// Fixed row/block order used throughout: `(R, N, T)`.
    pub const ALL: [Modality; 3] = [Modality::R, Modality::N, Modality::T];

    pub fn index(self) -> usize {
        match self {
            Modality::R => 0,
            Modality::N => 1,
            Modality::T => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::R => "R",
            Modality::N => "N",
            Modality::T => "T",
        }
    }

    /// The two other modalities, in `(R, N, T)` order.
    pub fn others(self) -> [Modality; 2] {
        match self {
            Modality::R => [Modality::N, Modality::T],
            Modality::N => [Modality::R, Modality::T],
            Modality::T => [Modality::R, Modality::N],
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "R" => Ok(Modality::R),
            "N" => Ok(Modality::N),
            "T" => Ok(Modality::T),
            other => Err(Error::arg(alloc::format!("unknown modality {other:?}"))),
        }
    }
}
