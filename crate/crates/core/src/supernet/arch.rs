//! Hard architecture selections and their JSON form.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::candidate::PrecisionCandidate;
use super::gumbel::{edge_probabilities, sample_categorical};
use super::spec::SuperNetSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockChoice {
    pub id: String,
    pub choice: PrecisionCandidate,
}

/// Where an architecture came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchMeta {
    pub epoch: u32,
    pub seed: u64,
}

/// One selected candidate per choice block, in network order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub blocks: Vec<BlockChoice>,
    #[serde(default)]
    pub meta: ArchMeta,
}

impl Architecture {
    pub fn from_indices(spec: &SuperNetSpec, indices: &[usize], meta: ArchMeta) -> Result<Self> {
        if indices.len() != spec.num_blocks() {
            return Err(Error::invalid(format!(
                "{} selections for {} choice blocks",
                indices.len(),
                spec.num_blocks()
            )));
        }
        let blocks = spec
            .choice_blocks()
            .zip(indices)
            .map(|(b, &i)| {
                let choice = *b
                    .candidates
                    .get(i)
                    .ok_or_else(|| Error::invalid(format!("block `{}` has no candidate {i}", b.id)))?;
                Ok(BlockChoice {
                    id: b.id.clone(),
                    choice,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Architecture { blocks, meta })
    }

    /// The same candidate in every block; fails if a block does not offer it.
    pub fn uniform(spec: &SuperNetSpec, choice: PrecisionCandidate) -> Result<Self> {
        let blocks = spec
            .choice_blocks()
            .map(|b| BlockChoice {
                id: b.id.clone(),
                choice,
            })
            .collect();
        let arch = Architecture {
            blocks,
            meta: ArchMeta::default(),
        };
        arch.indices(spec)?;
        Ok(arch)
    }

    /// Candidate index of each block; checks the architecture against `spec`.
    pub fn indices(&self, spec: &SuperNetSpec) -> Result<Vec<usize>> {
        if self.blocks.len() != spec.num_blocks() {
            return Err(Error::invalid(format!(
                "architecture has {} blocks, network has {}",
                self.blocks.len(),
                spec.num_blocks()
            )));
        }
        spec.choice_blocks()
            .zip(&self.blocks)
            .map(|(b, sel)| {
                if b.id != sel.id {
                    return Err(Error::invalid(format!("expected block `{}`, found `{}`", b.id, sel.id)));
                }
                b.candidates
                    .iter()
                    .position(|c| *c == sel.choice)
                    .ok_or_else(|| Error::invalid(format!("block `{}` does not offer candidate {}", b.id, sel.choice)))
            })
            .collect()
    }

    /// One-hot edge masks, one vector per block.
    pub fn masks(&self, spec: &SuperNetSpec) -> Result<Vec<Vec<f64>>> {
        let idx = self.indices(spec)?;
        Ok(spec
            .choice_blocks()
            .zip(idx)
            .map(|(b, i)| {
                let mut m = vec![0.0; b.candidates.len()];
                m[i] = 1.0;
                m
            })
            .collect())
    }

    /// Compact text form such as `w4a32-w2a32-skip`.
    pub fn label(&self) -> String {
        self.blocks
            .iter()
            .map(|b| b.choice.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }
}

/// Samples each block independently from `softmax(theta_b)`.
pub fn sample_architecture<R: Rng + ?Sized>(
    spec: &SuperNetSpec,
    thetas: &[Vec<f64>],
    rng: &mut R,
    meta: ArchMeta,
) -> Result<Architecture> {
    if thetas.len() != spec.num_blocks() {
        return Err(Error::invalid(format!(
            "{} theta vectors for {} blocks",
            thetas.len(),
            spec.num_blocks()
        )));
    }
    let indices: Vec<usize> = thetas
        .iter()
        .map(|t| sample_categorical(&edge_probabilities(t), rng))
        .collect();
    Architecture::from_indices(spec, &indices, meta)
}

/// Most probable candidate of every block.
pub fn most_likely_architecture(spec: &SuperNetSpec, thetas: &[Vec<f64>], meta: ArchMeta) -> Result<Architecture> {
    let indices: Vec<usize> = thetas
        .iter()
        .map(|t| {
            // first maximum wins
            t.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect();
    Architecture::from_indices(spec, &indices, meta)
}

/// Snapshot of the architecture parameters of a super net.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaSnapshot {
    pub epoch: u32,
    pub blocks: Vec<BlockTheta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockTheta {
    pub id: String,
    pub candidates: Vec<PrecisionCandidate>,
    pub theta: Vec<f64>,
}

impl ThetaSnapshot {
    pub fn thetas(&self) -> Vec<Vec<f64>> {
        self.blocks.iter().map(|b| b.theta.clone()).collect()
    }

    /// Minimal network description carrying the snapshot's blocks. Enough for
    /// sampling and architecture serialization, not for building a network.
    pub fn choice_spec(&self) -> SuperNetSpec {
        use super::spec::{BlockTemplate, ChoiceBlockSpec, ConvShape, LayerSpec};
        let shape = ConvShape {
            in_channels: 1,
            out_channels: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        SuperNetSpec {
            input: [1, 1, 1],
            classes: 2,
            layers: self
                .blocks
                .iter()
                .map(|b| {
                    LayerSpec::Choice(ChoiceBlockSpec {
                        id: b.id.clone(),
                        block: BlockTemplate::Conv(shape),
                        candidates: b.candidates.clone(),
                    })
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for b in &self.blocks {
            if b.theta.len() != b.candidates.len() || b.theta.len() < 2 {
                return Err(Error::invalid(format!(
                    "block `{}`: {} theta values for {} candidates",
                    b.id,
                    b.theta.len(),
                    b.candidates.len()
                )));
            }
            if b.theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("theta of block `{}`", b.id)));
            }
        }
        Ok(())
    }
}
