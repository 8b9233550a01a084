//! Exhaustive ground truth for tiny design spaces: train every precision
//! assignment under one fixed budget and rank them by the search objective.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::{CostConfig, CostTable};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::pipeline::{resolve_cost_config, train_child, ChildConfig};
use crate::supernet::{ArchMeta, Architecture, PrecisionCandidate, SuperNetSpec};

pub const DEFAULT_LIMIT: u128 = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Largest design space that may be enumerated.
    pub limit: u128,
    /// Training budget of every enumerated child; `None` reuses the run's
    /// child settings.
    pub child: Option<ChildConfig>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            limit: DEFAULT_LIMIT,
            child: None,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        match &self.child {
            Some(c) => c.validate(),
            None => Ok(()),
        }
    }
}

/// The choice blocks of a network and their candidate lists.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignSpace {
    spec: SuperNetSpec,
    candidates: Vec<Vec<PrecisionCandidate>>,
}

impl DesignSpace {
    pub fn new(spec: &SuperNetSpec) -> Result<Self> {
        spec.validate()?;
        Ok(DesignSpace {
            spec: spec.clone(),
            candidates: spec.choice_blocks().map(|b| b.candidates.clone()).collect(),
        })
    }

    pub fn spec(&self) -> &SuperNetSpec {
        &self.spec
    }

    /// Product of the per-block candidate counts (saturating).
    pub fn size(&self) -> u128 {
        self.candidates
            .iter()
            .fold(1u128, |acc, c| acc.saturating_mul(c.len() as u128))
    }

    /// All assignments in lexicographic order of candidate indices, the last
    /// block varying fastest.
    pub fn enumerate(&self, limit: u128) -> Result<Vec<Architecture>> {
        let size = self.size();
        if size > limit {
            return Err(Error::SpaceTooLarge { size, limit });
        }
        let n = self.candidates.len();
        let mut idx = vec![0usize; n];
        let mut out = Vec::with_capacity(size as usize);
        loop {
            out.push(Architecture::from_indices(&self.spec, &idx, ArchMeta::default())?);
            let mut b = n;
            loop {
                if b == 0 {
                    return Ok(out);
                }
                b -= 1;
                idx[b] += 1;
                if idx[b] < self.candidates[b].len() {
                    break;
                }
                idx[b] = 0;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub architecture: Architecture,
    pub indices: Vec<usize>,
    /// Mean cross entropy on the held-out set; infinite for diverged runs.
    pub cross_entropy: f64,
    pub accuracy: Option<f64>,
    pub cost: f64,
    /// Cross entropy times the cost weighting.
    pub loss: f64,
}

/// Entries sorted best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub entries: Vec<OracleEntry>,
}

fn compare(a: &OracleEntry, b: &OracleEntry) -> Ordering {
    a.loss
        .total_cmp(&b.loss)
        .then(a.cost.total_cmp(&b.cost))
        .then_with(|| a.indices.cmp(&b.indices))
}

impl Ranking {
    /// Sorts by loss, then cost, then candidate indices.
    pub fn from_entries(mut entries: Vec<OracleEntry>) -> Self {
        for e in &mut entries {
            if e.loss.is_nan() {
                e.loss = f64::INFINITY;
            }
        }
        entries.sort_by(compare);
        Ranking { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, arch: &Architecture) -> Option<usize> {
        self.entries.iter().position(|e| e.architecture.blocks == arch.blocks)
    }

    /// Rank index over `len - 1`: 0 for the best, 1 for the worst.
    pub fn percentile_of(&self, arch: &Architecture) -> Result<f64> {
        let pos = self
            .position(arch)
            .ok_or_else(|| Error::invalid(format!("architecture {} is not in the ranking", arch.label())))?;
        if self.len() == 1 {
            return Ok(0.0);
        }
        Ok(pos as f64 / (self.len() - 1) as f64)
    }

    /// Writes `oracle_results.csv` with one row per architecture, best first.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["rank", "arch", "indices", "cross_entropy", "cost", "loss", "accuracy"])?;
        for (rank, e) in self.entries.iter().enumerate() {
            let idx: Vec<String> = e.indices.iter().map(|i| i.to_string()).collect();
            w.write_record([
                rank.to_string(),
                e.architecture.label(),
                idx.join("-"),
                e.cross_entropy.to_string(),
                e.cost.to_string(),
                e.loss.to_string(),
                e.accuracy.map(|a| a.to_string()).unwrap_or_else(|| "failed".into()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores one architecture: the cross entropy of a child trained on `train`
/// and measured on `test`, weighted by its cost.
pub fn score(
    spec: &SuperNetSpec,
    arch: &Architecture,
    train: &Dataset,
    test: &Dataset,
    child: &ChildConfig,
    table: &CostTable,
    cost: &CostConfig,
) -> Result<OracleEntry> {
    let indices = arch.indices(spec)?;
    let c = table.cost_of(&indices)?;
    let r = train_child(spec, arch, train, test, child, None)?;
    let (ce, acc) = match r.evaluation {
        Some(e) if e.cross_entropy.is_finite() => (e.cross_entropy, Some(e.accuracy)),
        _ => (f64::INFINITY, None),
    };
    Ok(OracleEntry {
        architecture: arch.clone(),
        indices,
        cross_entropy: ce,
        accuracy: acc,
        cost: c,
        loss: ce * cost.weighting(c)?,
    })
}

/// Trains and ranks every architecture of `space`. Each child uses the same
/// budget and the same initialization seed, so the result does not depend on
/// enumeration order.
pub fn oracle_rank(
    space: &DesignSpace,
    train: &Dataset,
    test: &Dataset,
    child: &ChildConfig,
    cost: &CostConfig,
    limit: u128,
) -> Result<Ranking> {
    let archs = space.enumerate(limit)?;
    rank_architectures(space.spec(), &archs, train, test, child, cost)
}

/// Ranks an explicit list of architectures of `spec`.
pub fn rank_architectures(
    spec: &SuperNetSpec,
    archs: &[Architecture],
    train: &Dataset,
    test: &Dataset,
    child: &ChildConfig,
    cost: &CostConfig,
) -> Result<Ranking> {
    child.validate()?;
    let table = CostTable::new(spec, cost.objective, cost.count_bias)?;
    let cost = resolve_cost_config(&table, spec, cost)?;
    let entries = archs
        .iter()
        .map(|a| score(spec, a, train, test, child, &table, &cost))
        .collect::<Result<Vec<_>>>()?;
    Ok(Ranking::from_entries(entries))
}
