//! Bit-weighted model-size and compute costs, the log-power cost weighting
//! and the multiplicative search loss.
//!
//! Model size counts `#params * weight_bits` (bits). Compute counts
//! `#MACs * weight_bits * act_bits`. Only convolution and linear weights are
//! counted; batch-norm terms never are, and linear biases only on request.
//! Layers outside choice blocks are charged at 32 bits, and the baseline
//! charges every layer at 32 bits, so the unquantized network has a
//! compression rate of exactly 1.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::quant::FULL_PRECISION;
use crate::supernet::{
    Architecture, BlockTemplate, ConvShape, FeatureShape, LayerSpec, LinearSpec, PrecisionCandidate, SuperNetSpec,
};
use crate::tensor::{Real, Tensor};

const FP: f64 = FULL_PRECISION as f64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Parameter bits.
    #[default]
    Size,
    /// Bit-weighted multiply-accumulates.
    #[serde(alias = "flops")]
    Compute,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "size" => Ok(Objective::Size),
            "compute" | "flops" => Ok(Objective::Compute),
            _ => Err(Error::invalid(format!("unknown cost objective `{s}`"))),
        }
    }
}

pub fn conv_params(c: &ConvShape) -> u64 {
    (c.out_channels * c.in_channels * c.kernel * c.kernel) as u64
}

pub fn linear_params(l: &LinearSpec, count_bias: bool) -> u64 {
    let bias = if l.bias && count_bias { l.out_features } else { 0 };
    (l.in_features * l.out_features + bias) as u64
}

/// Multiply-accumulates of a convolution on an `h x w` input.
pub fn conv_macs(c: &ConvShape, h: usize, w: usize) -> Result<u64> {
    let (ho, wo) = c
        .out_hw(h, w)
        .ok_or_else(|| Error::shape(format!("kernel {} does not fit {h}x{w}", c.kernel)))?;
    Ok(conv_params(c) * (ho * wo) as u64)
}

pub fn linear_macs(l: &LinearSpec) -> u64 {
    (l.in_features * l.out_features) as u64
}

/// Convolutions of a block with the spatial size each one sees.
fn block_convs(template: &BlockTemplate, h: usize, w: usize) -> Result<Vec<(ConvShape, usize, usize)>> {
    let mut hw = (h, w);
    let mut out = Vec::new();
    for c in template.convs() {
        out.push((c, hw.0, hw.1));
        hw = c
            .out_hw(hw.0, hw.1)
            .ok_or_else(|| Error::shape("kernel does not fit block input"))?;
    }
    Ok(out)
}

/// Whole-network parameter count (conv and linear weights).
pub fn total_params(spec: &SuperNetSpec, count_bias: bool) -> Result<u64> {
    spec.validate()?;
    Ok(spec
        .layers
        .iter()
        .map(|l| match l {
            LayerSpec::Conv(c) => conv_params(&c.conv),
            LayerSpec::Choice(b) => b.block.convs().iter().map(conv_params).sum(),
            LayerSpec::Linear(l) => linear_params(l, count_bias),
            LayerSpec::Pool => 0,
        })
        .sum())
}

/// Whole-network multiply-accumulate count.
pub fn total_macs(spec: &SuperNetSpec) -> Result<u64> {
    let shapes = spec.validate()?;
    let mut total = 0;
    for (l, s) in spec.layers.iter().zip(shapes) {
        total += match (l, s) {
            (LayerSpec::Conv(c), FeatureShape::Spatial { h, w, .. }) => conv_macs(&c.conv, h, w)?,
            (LayerSpec::Choice(b), FeatureShape::Spatial { h, w, .. }) => block_convs(&b.block, h, w)?
                .iter()
                .map(|(c, h, w)| conv_macs(c, *h, *w))
                .sum::<Result<u64>>()?,
            (LayerSpec::Linear(l), _) => linear_macs(l),
            _ => 0,
        };
    }
    Ok(total)
}

/// Cost of a candidate given the block's parameter and MAC counts.
pub fn candidate_cost(objective: Objective, cand: PrecisionCandidate, params: u64, macs: u64) -> f64 {
    match (cand.weight_bits(), cand.act_bits()) {
        (Some(w), Some(a)) => match objective {
            Objective::Size => params as f64 * w as f64,
            Objective::Compute => macs as f64 * w as f64 * a as f64,
        },
        _ => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCosts {
    pub id: String,
    pub candidates: Vec<PrecisionCandidate>,
    pub costs: Vec<f64>,
    /// Cost of the block at 32-bit weights and activations.
    pub baseline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedCost {
    pub name: String,
    pub cost: f64,
}

/// Precomputed costs of every candidate of every choice block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub objective: Objective,
    pub fixed: Vec<FixedCost>,
    pub blocks: Vec<BlockCosts>,
}

impl CostTable {
    pub fn new(spec: &SuperNetSpec, objective: Objective, count_bias: bool) -> Result<Self> {
        let shapes = spec.validate()?;
        let fixed_cost = |params: u64, macs: u64| match objective {
            Objective::Size => params as f64 * FP,
            Objective::Compute => macs as f64 * FP * FP,
        };
        let mut fixed = Vec::new();
        let mut blocks = Vec::new();
        for (l, s) in spec.layers.iter().zip(shapes) {
            match (l, s) {
                (LayerSpec::Conv(c), FeatureShape::Spatial { h, w, .. }) => fixed.push(FixedCost {
                    name: c.name.clone(),
                    cost: fixed_cost(conv_params(&c.conv), conv_macs(&c.conv, h, w)?),
                }),
                (LayerSpec::Linear(l), _) => fixed.push(FixedCost {
                    name: l.name.clone(),
                    cost: fixed_cost(linear_params(l, count_bias), linear_macs(l)),
                }),
                (LayerSpec::Choice(b), FeatureShape::Spatial { h, w, .. }) => {
                    let convs = block_convs(&b.block, h, w)?;
                    let params: u64 = convs.iter().map(|(c, _, _)| conv_params(c)).sum();
                    let macs = convs
                        .iter()
                        .map(|(c, h, w)| conv_macs(c, *h, *w))
                        .sum::<Result<u64>>()?;
                    blocks.push(BlockCosts {
                        id: b.id.clone(),
                        candidates: b.candidates.clone(),
                        costs: b
                            .candidates
                            .iter()
                            .map(|&c| candidate_cost(objective, c, params, macs))
                            .collect(),
                        baseline: candidate_cost(objective, PrecisionCandidate::FullPrecision, params, macs),
                    });
                }
                _ => {}
            }
        }
        Ok(CostTable {
            objective,
            fixed,
            blocks,
        })
    }

    pub fn fixed_total(&self) -> f64 {
        self.fixed.iter().map(|f| f.cost).sum()
    }

    /// Cost of the all-32-bit network.
    pub fn baseline(&self) -> f64 {
        self.fixed_total() + self.blocks.iter().map(|b| b.baseline).sum::<f64>()
    }

    /// Exact cost of the architecture with candidate `indices`.
    pub fn cost_of(&self, indices: &[usize]) -> Result<f64> {
        if indices.len() != self.blocks.len() {
            return Err(Error::invalid(format!(
                "{} selections for {} blocks",
                indices.len(),
                self.blocks.len()
            )));
        }
        let mut total = self.fixed_total();
        for (b, &i) in self.blocks.iter().zip(indices) {
            total += *b
                .costs
                .get(i)
                .ok_or_else(|| Error::invalid(format!("block `{}` has no candidate {i}", b.id)))?;
        }
        Ok(total)
    }

    /// Expected cost under relaxed masks. The mask values need not be one-hot
    /// or even normalized; the result is linear in them.
    pub fn expected_cost_values(&self, masks: &[Vec<f64>]) -> Result<f64> {
        if masks.len() != self.blocks.len() {
            return Err(Error::invalid(format!(
                "{} masks for {} blocks",
                masks.len(),
                self.blocks.len()
            )));
        }
        let mut total = self.fixed_total();
        for (b, m) in self.blocks.iter().zip(masks) {
            if m.len() != b.costs.len() {
                return Err(Error::shape(format!("block `{}`: mask of length {}", b.id, m.len())));
            }
            total += m.iter().zip(&b.costs).map(|(m, c)| m * c).sum::<f64>();
        }
        Ok(total)
    }

    /// Expected cost on the tape. Each mask is `[K]`, or `[N,K]` in which
    /// case the per-example costs are averaged. The fixed layers add a
    /// constant, so they do not affect the gradient.
    pub fn expected_cost<T: Real>(&self, tape: &mut Tape<T>, masks: &[Var]) -> Result<Var> {
        if masks.len() != self.blocks.len() {
            return Err(Error::invalid(format!(
                "{} masks for {} blocks",
                masks.len(),
                self.blocks.len()
            )));
        }
        let mut total: Option<Var> = None;
        for (b, &m) in self.blocks.iter().zip(masks) {
            let k = b.costs.len();
            let ms = tape.shape(m).to_vec();
            let term = match ms.as_slice() {
                [kk] if *kk == k => {
                    let c = tape.constant(Tensor::from_vec(b.costs.iter().map(|&c| T::lit(c)).collect()));
                    tape.dot(m, c)?
                }
                [n, kk] if *kk == k => {
                    let n = *n;
                    let c = tape.constant(Tensor::from_fn(&[n, k], |i| T::lit(b.costs[i % k] / n as f64)));
                    tape.dot(m, c)?
                }
                _ => {
                    return Err(Error::shape(format!(
                        "block `{}`: mask shape {ms:?} for {k} candidates",
                        b.id
                    )))
                }
            };
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term)?,
            });
        }
        let fixed = T::lit(self.fixed_total());
        Ok(match total {
            Some(t) => tape.add_scalar(t, fixed),
            None => tape.constant(Tensor::scalar(fixed)),
        })
    }

    pub fn report(&self, spec: &SuperNetSpec, arch: &Architecture) -> Result<CostReport> {
        let idx = arch.indices(spec)?;
        let mut breakdown: Vec<LayerCost> = self
            .fixed
            .iter()
            .map(|f| LayerCost {
                name: f.name.clone(),
                choice: None,
                cost: f.cost,
            })
            .collect();
        breakdown.extend(self.blocks.iter().zip(&idx).map(|(b, &i)| LayerCost {
            name: b.id.clone(),
            choice: Some(b.candidates[i]),
            cost: b.costs[i],
        }));
        let total = self.cost_of(&idx)?;
        let baseline = self.baseline();
        Ok(CostReport {
            objective: self.objective,
            total,
            baseline,
            compression: compression_rate(baseline, total)?,
            breakdown,
        })
    }
}

/// `baseline / cost`.
pub fn compression_rate(baseline: f64, cost: f64) -> Result<f64> {
    if !(cost > 0.0) {
        return Err(Error::invalid(format!("compression of a network with cost {cost}")));
    }
    Ok(baseline / cost)
}

/// Compression of a network quantized uniformly to `w_bits`/`a_bits`, with
/// `branches` parallel copies of each operator. Model size ignores the
/// activation width.
pub fn uniform_compression(objective: Objective, w_bits: u32, a_bits: u32, branches: u32) -> f64 {
    let w = FP / w_bits as f64;
    let r = match objective {
        Objective::Size => w,
        Objective::Compute => w * FP / a_bits as f64,
    };
    r / branches as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    /// Selected candidate; `None` for layers outside choice blocks.
    pub choice: Option<PrecisionCandidate>,
    pub cost: f64,
}

/// Cost of one architecture. `total` is the sum of `breakdown`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub objective: Objective,
    pub total: f64,
    pub baseline: f64,
    pub compression: f64,
    pub breakdown: Vec<LayerCost>,
}

/// Weighting of the cost inside the loss: `beta * ln(cost)^gamma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub objective: Objective,
    pub beta: f64,
    pub gamma: f64,
    /// Replace `beta` at the start of a search so that the weighting of the
    /// initial expected cost is exactly 1.
    pub auto_calibrate_beta: bool,
    /// Charge linear-layer biases as parameters.
    pub count_bias: bool,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            objective: Objective::Size,
            beta: 0.1,
            gamma: 0.9,
            auto_calibrate_beta: false,
            count_bias: false,
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) || !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!(
                "beta and gamma must be positive, got {} and {}",
                self.beta, self.gamma
            )));
        }
        Ok(())
    }

    /// `beta * ln(cost)^gamma` evaluated in f64.
    pub fn weighting(&self, cost: f64) -> Result<f64> {
        check_cost(cost)?;
        Ok(self.beta * cost.ln().powf(self.gamma))
    }
}

fn check_cost(cost: f64) -> Result<()> {
    if cost > 1.0 && cost.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "cost weighting needs a finite cost above 1, got {cost}"
        )))
    }
}

/// The `beta` at which `beta * ln(cost)^gamma = 1`.
pub fn calibrate_beta(cost: f64, gamma: f64) -> Result<f64> {
    check_cost(cost)?;
    Ok(1.0 / cost.ln().powf(gamma))
}

/// `beta * ln(cost)^gamma` on the tape.
pub fn cost_weighting<T: Real>(tape: &mut Tape<T>, cost: Var, config: &CostConfig) -> Result<Var> {
    if tape.value(cost).len() != 1 {
        return Err(Error::shape("cost must be a scalar"));
    }
    check_cost(tape.value(cost).item().as_f64())?;
    let l = tape.log(cost);
    let p = tape.powf(l, T::lit(config.gamma));
    Ok(tape.scale(p, T::lit(config.beta)))
}

/// `cross_entropy * beta * ln(cost)^gamma`.
///
/// The cost gradient is scaled by the cross entropy, so cost pressure fades
/// once the data is fit.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, cross_entropy: Var, cost: Var, config: &CostConfig) -> Result<Var> {
    let c = cost_weighting(tape, cost, config)?;
    let ce = match tape.shape(cross_entropy) {
        [] => cross_entropy,
        [1] => tape.reshape(cross_entropy, &[])?,
        s => return Err(Error::shape(format!("cross entropy must be a scalar, got {s:?}"))),
    };
    tape.mul(ce, c)
}
