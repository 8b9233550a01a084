use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{check_bits, FULL_PRECISION};

/// One option of a choice block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "CandidateRepr", into = "CandidateRepr")]
pub enum PrecisionCandidate {
    /// Weights and activations quantized to the given bit-widths; 32 leaves
    /// that side in floating point.
    Quantized {
        w_bits: u32,
        a_bits: u32,
    },
    FullPrecision,
    /// The block is bypassed; its output equals its input.
    Skip,
}

impl PrecisionCandidate {
    pub fn quantized(w_bits: u32, a_bits: u32) -> Result<Self> {
        check_bits(w_bits)?;
        check_bits(a_bits)?;
        Ok(PrecisionCandidate::Quantized { w_bits, a_bits })
    }

    /// Weight-only candidate from a single precision value: 0 skips the
    /// block, 32 is full precision, anything else quantizes the weights with
    /// floating-point activations.
    pub fn from_weight_precision(bits: u32) -> Result<Self> {
        match bits {
            0 => Ok(PrecisionCandidate::Skip),
            FULL_PRECISION => Ok(PrecisionCandidate::FullPrecision),
            b => Self::quantized(b, FULL_PRECISION),
        }
    }

    /// Weight bit-width, `None` for skip.
    pub fn weight_bits(self) -> Option<u32> {
        match self {
            PrecisionCandidate::Quantized { w_bits, .. } => Some(w_bits),
            PrecisionCandidate::FullPrecision => Some(FULL_PRECISION),
            PrecisionCandidate::Skip => None,
        }
    }

    /// Activation bit-width, `None` for skip.
    pub fn act_bits(self) -> Option<u32> {
        match self {
            PrecisionCandidate::Quantized { a_bits, .. } => Some(a_bits),
            PrecisionCandidate::FullPrecision => Some(FULL_PRECISION),
            PrecisionCandidate::Skip => None,
        }
    }

    pub fn is_skip(self) -> bool {
        self == PrecisionCandidate::Skip
    }

    pub fn validate(self) -> Result<()> {
        if let PrecisionCandidate::Quantized { w_bits, a_bits } = self {
            check_bits(w_bits)?;
            check_bits(a_bits)?;
        }
        Ok(())
    }
}

impl fmt::Display for PrecisionCandidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrecisionCandidate::Quantized { w_bits, a_bits } => write!(f, "w{w_bits}a{a_bits}"),
            PrecisionCandidate::FullPrecision => f.write_str("full"),
            PrecisionCandidate::Skip => f.write_str("skip"),
        }
    }
}

/// Parses the display form: `w<bits>a<bits>`, `full` or `skip`.
///
/// ```
/// use dnas::supernet::PrecisionCandidate;
/// let c: PrecisionCandidate = "w4a32".parse().unwrap();
/// assert_eq!((c.weight_bits(), c.act_bits()), (Some(4), Some(32)));
/// assert!("w9a2".parse::<PrecisionCandidate>().is_err());
/// ```
impl std::str::FromStr for PrecisionCandidate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => return Ok(PrecisionCandidate::FullPrecision),
            "skip" => return Ok(PrecisionCandidate::Skip),
            _ => {}
        }
        let bad = || Error::invalid(format!("cannot parse candidate {s:?}"));
        let rest = s.strip_prefix('w').ok_or_else(bad)?;
        let (w, a) = rest.split_once('a').ok_or_else(bad)?;
        PrecisionCandidate::quantized(w.parse().map_err(|_| bad())?, a.parse().map_err(|_| bad())?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum CandidateKind {
    Quantized,
    Full,
    Skip,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateRepr {
    w_bits: Option<u32>,
    a_bits: Option<u32>,
    kind: CandidateKind,
}

impl TryFrom<CandidateRepr> for PrecisionCandidate {
    type Error = Error;

    fn try_from(r: CandidateRepr) -> Result<Self> {
        match (r.kind, r.w_bits, r.a_bits) {
            (CandidateKind::Quantized, Some(w), Some(a)) => PrecisionCandidate::quantized(w, a),
            (CandidateKind::Quantized, _, _) => Err(Error::invalid("quantized candidate needs w_bits and a_bits")),
            (CandidateKind::Full, None | Some(FULL_PRECISION), None | Some(FULL_PRECISION)) => {
                Ok(PrecisionCandidate::FullPrecision)
            }
            (CandidateKind::Full, _, _) => Err(Error::invalid(
                "full-precision candidate must have 32-bit or null widths",
            )),
            (CandidateKind::Skip, None, None) => Ok(PrecisionCandidate::Skip),
            (CandidateKind::Skip, _, _) => Err(Error::invalid("skip candidate must have null bit-widths")),
        }
    }
}

impl From<PrecisionCandidate> for CandidateRepr {
    fn from(c: PrecisionCandidate) -> Self {
        let kind = match c {
            PrecisionCandidate::Quantized { .. } => CandidateKind::Quantized,
            PrecisionCandidate::FullPrecision => CandidateKind::Full,
            PrecisionCandidate::Skip => CandidateKind::Skip,
        };
        CandidateRepr {
            w_bits: c.weight_bits(),
            a_bits: c.act_bits(),
            kind,
        }
    }
}
