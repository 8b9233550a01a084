//! The search loop: alternating weight and architecture epochs on a super
//! net, periodic architecture sampling, and training of sampled children.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_lr, BnMode, Optimizer, OptimizerKind, ParamKind, Tape, Var};
use crate::config::write_json;
use crate::cost::{calibrate_beta, total_loss, CostConfig, CostReport, CostTable};
use crate::data::{cutout_in_place, split_stratified, Dataset};
use crate::error::{Error, Result};
use crate::quant::ALPHA_FLOOR;
use crate::supernet::{
    edge_probabilities, gumbel_noise, gumbel_softmax, most_likely_architecture, sample_architecture, ArchMeta,
    Architecture, BlockTheta, Network, SuperNetSpec, TemperatureSchedule, ThetaSnapshot,
};
use crate::tensor::{Real, Tensor};

/// SplitMix64 finalizer, used to derive independent seeds for each stream
/// of randomness from one run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_WEIGHTS: u64 = 2;
const STREAM_THETA: u64 = 3;
const STREAM_SPLIT: u64 = 4;
const STREAM_SAMPLE: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.2,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// How many Gumbel draws a block takes per mini-batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskGranularity {
    /// One mask per block shared by the whole batch.
    #[default]
    PerBatch,
    /// An independent mask per example.
    PerExample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub epochs: u32,
    /// Architecture logits stay fixed while `epoch <= warmup`.
    pub warmup: u32,
    pub temperature: TemperatureSchedule,
    pub sample_every: u32,
    pub samples_per_event: usize,
    pub batch_size: usize,
    pub weights: SgdConfig,
    /// Weight decay of clipping bounds; `None` uses the weight decay of the
    /// network weights.
    pub alpha_weight_decay: Option<f64>,
    pub theta: AdamConfig,
    pub cost: CostConfig,
    /// Fraction of the training set used for weights; the rest trains the
    /// architecture logits.
    pub split_ratio: f64,
    pub mask_granularity: MaskGranularity,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 90,
            warmup: 10,
            temperature: TemperatureSchedule::default(),
            sample_every: 10,
            samples_per_event: 5,
            batch_size: 512,
            weights: SgdConfig::default(),
            alpha_weight_decay: None,
            theta: AdamConfig::default(),
            cost: CostConfig::default(),
            split_ratio: 0.8,
            mask_granularity: MaskGranularity::PerBatch,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup >= self.epochs {
            return Err(Error::invalid(format!(
                "need 0 <= warmup < epochs, got warmup {} and epochs {}",
                self.warmup, self.epochs
            )));
        }
        if self.sample_every == 0 || self.batch_size == 0 {
            return Err(Error::invalid("sample_every and batch_size must be positive"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::invalid("split_ratio must lie in (0, 1)"));
        }
        self.temperature.validate()?;
        self.cost.validate()
    }

    /// Whether architectures are drawn at the end of `epoch`.
    pub fn is_sampling_epoch(&self, epoch: u32) -> bool {
        epoch.is_multiple_of(self.sample_every) || epoch + 1 == self.epochs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChildConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    /// Side of the cutout square; `None` disables cutout.
    pub cutout: Option<usize>,
    /// Start from the super net's weights instead of a fresh initialization.
    pub inherit_weights: bool,
    pub seed: u64,
}

impl Default for ChildConfig {
    fn default() -> Self {
        ChildConfig {
            epochs: 160,
            batch_size: 512,
            optimizer: SgdConfig::default(),
            cutout: Some(16),
            inherit_weights: false,
            seed: 0,
        }
    }
}

impl ChildConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("child epochs and batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Weights,
    Theta,
}

impl Phase {
    fn as_str(self) -> &'static str {
        match self {
            Phase::Weights => "weights",
            Phase::Theta => "theta",
        }
    }
}

/// Batch-size weighted means over one epoch of one phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub phase: Phase,
    pub loss: f64,
    pub ce: f64,
    pub cost: f64,
    pub tau: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub id: usize,
    pub epoch: u32,
    pub draw: usize,
    pub architecture: Architecture,
    pub cost: CostReport,
    pub accuracy: Option<f64>,
    pub failed: bool,
}

/// Sampled architectures in sampling order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArchQueue {
    pub entries: Vec<QueueEntry>,
}

pub struct SearchOutcome {
    pub supernet: Network<f32>,
    pub queue: ArchQueue,
    /// Most probable candidate of every block after the last epoch.
    pub selected: Architecture,
    /// The cost coefficient actually used (after calibration, if enabled).
    pub beta: f64,
    pub metrics: Vec<EpochMetrics>,
    /// Logits at the end of every epoch.
    pub theta_history: Vec<ThetaSnapshot>,
}

impl SearchOutcome {
    pub fn temperatures(&self) -> Vec<(u32, f64)> {
        self.metrics
            .iter()
            .filter(|m| m.phase == Phase::Weights)
            .map(|m| (m.epoch, m.tau))
            .collect()
    }
}

/// Returns `cfg` with β calibrated when requested: the weighting equals one
/// at the expected cost under uniform candidate probabilities, which is the
/// state of the logits at initialization.
pub fn resolve_cost_config(table: &CostTable, spec: &SuperNetSpec, cfg: &CostConfig) -> Result<CostConfig> {
    let mut out = *cfg;
    if cfg.auto_calibrate_beta {
        let masks: Vec<Vec<f64>> = spec
            .choice_blocks()
            .map(|b| vec![1.0 / b.candidates.len() as f64; b.candidates.len()])
            .collect();
        out.beta = calibrate_beta(table.expected_cost_values(&masks)?, cfg.gamma)?;
    }
    Ok(out)
}

/// Splits a training set into the weight part and the architecture part.
pub fn split_search_data(train: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    split_stratified(train, ratio, seed)
}

fn snapshot<T: Real>(net: &Network<T>, epoch: u32) -> ThetaSnapshot {
    ThetaSnapshot {
        epoch,
        blocks: net
            .spec()
            .choice_blocks()
            .zip(net.thetas())
            .map(|(b, theta)| BlockTheta {
                id: b.id.clone(),
                candidates: b.candidates.clone(),
                theta,
            })
            .collect(),
    }
}

struct Accum {
    n: f64,
    loss: f64,
    ce: f64,
    cost: f64,
}

impl Accum {
    fn new() -> Self {
        Accum {
            n: 0.0,
            loss: 0.0,
            ce: 0.0,
            cost: 0.0,
        }
    }

    fn add(&mut self, n: usize, loss: f64, ce: f64, cost: f64) {
        let w = n as f64;
        self.n += w;
        self.loss += w * loss;
        self.ce += w * ce;
        self.cost += w * cost;
    }

    fn finish(&self, epoch: u32, phase: Phase, tau: f64, lr: f64) -> EpochMetrics {
        let d = self.n.max(1.0);
        EpochMetrics {
            epoch,
            phase,
            loss: self.loss / d,
            ce: self.ce / d,
            cost: self.cost / d,
            tau,
            lr,
        }
    }
}

#[derive(Serialize)]
struct NanDump<'a> {
    epoch: u32,
    phase: Phase,
    batch: usize,
    tau: f64,
    loss: f64,
    ce: f64,
    cost: f64,
    theta: &'a ThetaSnapshot,
}

/// A super net in the middle of a search, advanced one phase-epoch at a
/// time. [`run_search`] drives it through the full schedule.
pub struct SearchState<'a> {
    cfg: &'a SearchConfig,
    cost_cfg: CostConfig,
    table: CostTable,
    net: Network<f32>,
    out: Option<&'a Path>,
    w_opt: Optimizer<f32>,
    t_opt: Optimizer<f32>,
    w_rng: ChaCha8Rng,
    t_rng: ChaCha8Rng,
}

impl<'a> SearchState<'a> {
    /// A fresh super net with zero logits. A non-finite loss writes
    /// `nan_dump.json` into `out` (when given) before failing.
    pub fn new(spec: &SuperNetSpec, cfg: &'a SearchConfig, out: Option<&'a Path>) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        let net = Network::<f32>::supernet(spec, derive_seed(cfg.seed, STREAM_INIT))?;
        let table = CostTable::new(spec, cfg.cost.objective, cfg.cost.count_bias)?;
        let cost_cfg = resolve_cost_config(&table, spec, &cfg.cost)?;
        Ok(SearchState {
            cfg,
            cost_cfg,
            table,
            net,
            out,
            w_opt: Optimizer::sgd(cfg.weights.lr, cfg.weights.momentum, cfg.weights.weight_decay),
            t_opt: Optimizer::new(
                OptimizerKind::Adam {
                    beta1: cfg.theta.beta1,
                    beta2: cfg.theta.beta2,
                    eps: cfg.theta.eps,
                },
                cfg.theta.lr,
                cfg.theta.weight_decay,
            ),
            w_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_WEIGHTS)),
            t_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_THETA)),
        })
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn cost_table(&self) -> &CostTable {
        &self.table
    }

    /// The cost settings in use, with β resolved.
    pub fn cost_config(&self) -> &CostConfig {
        &self.cost_cfg
    }

    pub fn snapshot(&self, epoch: u32) -> ThetaSnapshot {
        snapshot(&self.net, epoch)
    }

    /// One pass over `data` updating weights and clipping bounds with the
    /// logits held fixed. The learning rate follows the cosine schedule.
    pub fn weight_epoch(&mut self, epoch: u32, data: &Dataset) -> Result<EpochMetrics> {
        let lr = cosine_lr(self.cfg.weights.lr, epoch as f64, self.cfg.epochs as f64);
        self.epoch(epoch, Phase::Weights, data, lr)
    }

    /// One pass over `data` updating only the logits, with batch-norm
    /// running statistics left untouched.
    pub fn theta_epoch(&mut self, epoch: u32, data: &Dataset) -> Result<EpochMetrics> {
        let lr = self.cfg.theta.lr;
        self.epoch(epoch, Phase::Theta, data, lr)
    }

    fn epoch(&mut self, epoch: u32, phase: Phase, data: &Dataset, lr: f64) -> Result<EpochMetrics> {
        if data.shape() != self.net.spec().input || data.classes() != self.net.spec().classes || data.is_empty() {
            return Err(Error::invalid(format!(
                "data of shape {:?} with {} classes does not fit the network",
                data.shape(),
                data.classes()
            )));
        }
        let (opt, rng) = match phase {
            Phase::Weights => (&mut self.w_opt, &mut self.w_rng),
            Phase::Theta => (&mut self.t_opt, &mut self.t_rng),
        };
        let tau = self.cfg.temperature.temperature_at(epoch);
        let mut acc = Accum::new();
        let theta_ids = self.net.theta_ids();
        for (b, idx) in data
            .batches(self.cfg.batch_size, Some(&mut *rng))
            .into_iter()
            .enumerate()
        {
            let (x, labels) = data.batch(&idx);
            let n = labels.len();
            let mut tape = Tape::<f32>::new();
            let bind = self.net.params().bind(&mut tape, |k| match phase {
                Phase::Weights => matches!(k, ParamKind::Weight | ParamKind::Alpha),
                Phase::Theta => k == ParamKind::Theta,
            });
            let masks = theta_ids
                .iter()
                .map(|&id| {
                    let t = bind.var(id);
                    let k = tape.value(t).len();
                    let rows = match self.cfg.mask_granularity {
                        MaskGranularity::PerBatch => 1,
                        MaskGranularity::PerExample => n,
                    };
                    let noise = gumbel_noise(&mut *rng, rows * k);
                    gumbel_softmax(&mut tape, t, &noise, tau)
                })
                .collect::<Result<Vec<Var>>>()?;
            let xv = tape.constant(x);
            let mode = match phase {
                Phase::Weights => BnMode::Train,
                Phase::Theta => BnMode::TrainFrozen,
            };
            let logits = self.net.forward(&mut tape, &bind, xv, &masks, mode)?;
            let ce = tape.softmax_cross_entropy(logits, &labels)?;
            let cost = self.table.expected_cost(&mut tape, &masks)?;
            let loss = total_loss(&mut tape, ce, cost, &self.cost_cfg)?;
            let (lv, cv, kv) = (
                tape.value(loss).item().as_f64(),
                tape.value(ce).item().as_f64(),
                tape.value(cost).item().as_f64(),
            );
            if !lv.is_finite() {
                dump(self.out, &self.net, epoch, phase, b, tau, lv, cv, kv)?;
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch}, {} phase, batch {b}",
                    phase.as_str()
                )));
            }
            acc.add(n, lv, cv, kv);
            let mut grads = tape.backward(loss)?;
            let mut g = bind.gradients(&mut grads);
            if phase == Phase::Weights {
                if let Some(wd_a) = self.cfg.alpha_weight_decay {
                    // coupled decay: shift alpha's gradient to its own rate
                    let extra = wd_a - self.cfg.weights.weight_decay;
                    for (id, grad) in &mut g {
                        if self.net.params().kind(*id) == ParamKind::Alpha {
                            let p = self.net.params().get(*id).item();
                            for v in grad.data_mut() {
                                *v += f32::lit(extra) * p;
                            }
                        }
                    }
                }
            }
            opt.step(self.net.params_mut(), &g, lr);
            if phase == Phase::Weights {
                clamp_alphas(&mut self.net);
            }
        }
        Ok(acc.finish(epoch, phase, tau, lr))
    }

    pub fn into_network(self) -> Network<f32> {
        self.net
    }
}

#[allow(clippy::too_many_arguments)]
fn dump(
    out: Option<&Path>,
    net: &Network<f32>,
    epoch: u32,
    phase: Phase,
    batch: usize,
    tau: f64,
    loss: f64,
    ce: f64,
    cost: f64,
) -> Result<()> {
    let Some(out) = out else { return Ok(()) };
    fs::create_dir_all(out)?;
    write_json(
        &out.join("nan_dump.json"),
        &NanDump {
            epoch,
            phase,
            batch,
            tau,
            loss,
            ce,
            cost,
            theta: &snapshot(net, epoch),
        },
    )
}

fn clamp_alphas<T: Real>(net: &mut Network<T>) {
    let ids: Vec<_> = net
        .params()
        .ids()
        .filter(|&id| net.params().kind(id) == ParamKind::Alpha)
        .collect();
    for id in ids {
        for v in net.params_mut().get_mut(id).data_mut() {
            if !(*v >= T::lit(ALPHA_FLOOR)) {
                *v = T::lit(ALPHA_FLOOR);
            }
        }
    }
}

/// Runs the architecture search on `weights_data` (weight epochs) and
/// `theta_data` (architecture epochs). When `out` is given, the run
/// directory files are written there.
pub fn run_search(
    spec: &SuperNetSpec,
    cfg: &SearchConfig,
    weights_data: &Dataset,
    theta_data: &Dataset,
    out: Option<&Path>,
) -> Result<SearchOutcome> {
    let mut s = SearchState::new(spec, cfg, out)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir.join("archs"))?;
        write_json(&dir.join("config.json"), cfg)?;
    }
    let mut metrics = Vec::new();
    let mut history = Vec::new();
    let mut queue = ArchQueue::default();
    for epoch in 0..cfg.epochs {
        metrics.push(s.weight_epoch(epoch, weights_data)?);
        if epoch > cfg.warmup {
            metrics.push(s.theta_epoch(epoch, theta_data)?);
        }
        let snap = s.snapshot(epoch);
        if cfg.is_sampling_epoch(epoch) {
            let seed = sampling_seed(cfg.seed, epoch);
            for (draw, arch) in sample_from_snapshot(&snap, spec, cfg.samples_per_event, seed)?
                .into_iter()
                .enumerate()
            {
                let cost = s.table.report(spec, &arch)?;
                queue.entries.push(QueueEntry {
                    id: queue.entries.len(),
                    epoch,
                    draw,
                    architecture: arch,
                    cost,
                    accuracy: None,
                    failed: false,
                });
            }
        }
        history.push(snap);
    }
    let selected = most_likely_architecture(
        spec,
        &s.net.thetas(),
        ArchMeta {
            epoch: cfg.epochs - 1,
            seed: cfg.seed,
        },
    )?;
    let beta = s.cost_cfg.beta;
    let outcome = SearchOutcome {
        supernet: s.into_network(),
        queue,
        selected,
        beta,
        metrics,
        theta_history: history,
    };
    if let Some(dir) = out {
        write_search_outputs(dir, spec, &outcome)?;
    }
    Ok(outcome)
}

/// Draws `n` architectures from a logit snapshot with a fresh generator
/// seeded by `seed`. The same snapshot and seed give the same draws.
pub fn sample_from_snapshot(
    snap: &ThetaSnapshot,
    spec: &SuperNetSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<Architecture>> {
    snap.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thetas = snap.thetas();
    (0..n)
        .map(|_| {
            sample_architecture(
                spec,
                &thetas,
                &mut rng,
                ArchMeta {
                    epoch: snap.epoch,
                    seed,
                },
            )
        })
        .collect()
}

/// Seed used for the draws of sampling epoch `epoch` in a run seeded with
/// `run_seed`.
pub fn sampling_seed(run_seed: u64, epoch: u32) -> u64 {
    derive_seed(run_seed, STREAM_SAMPLE + epoch as u64)
}

/// Seed of the weight/architecture split of a run seeded with `run_seed`.
pub fn split_seed(run_seed: u64) -> u64 {
    derive_seed(run_seed, STREAM_SPLIT)
}

#[derive(Serialize)]
struct ArchFile<'a> {
    id: usize,
    epoch: u32,
    draw: usize,
    architecture: &'a Architecture,
    cost: &'a CostReport,
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub beta: f64,
    pub selected: Architecture,
    pub final_probabilities: Vec<Vec<f64>>,
}

fn write_search_outputs(dir: &Path, spec: &SuperNetSpec, o: &SearchOutcome) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    w.write_record(["epoch", "phase", "loss", "ce", "cost", "tau", "lr"])?;
    for m in &o.metrics {
        w.write_record([
            m.epoch.to_string(),
            m.phase.as_str().to_string(),
            m.loss.to_string(),
            m.ce.to_string(),
            m.cost.to_string(),
            m.tau.to_string(),
            m.lr.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("theta_history.csv"))?;
    w.write_record(["epoch", "block", "candidate", "theta", "probability"])?;
    for snap in &o.theta_history {
        for b in &snap.blocks {
            let p = edge_probabilities(&b.theta);
            for (k, (t, p)) in b.theta.iter().zip(p).enumerate() {
                w.write_record([
                    snap.epoch.to_string(),
                    b.id.clone(),
                    b.candidates[k].to_string(),
                    t.to_string(),
                    p.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;

    for e in &o.queue.entries {
        write_json(
            &dir.join("archs").join(format!("{:03}.json", e.id)),
            &ArchFile {
                id: e.id,
                epoch: e.epoch,
                draw: e.draw,
                architecture: &e.architecture,
                cost: &e.cost,
            },
        )?;
    }
    if let Some(last) = o.theta_history.last() {
        write_json(&dir.join("theta_final.json"), last)?;
    }
    write_json(
        &dir.join("summary.json"),
        &SearchSummary {
            beta: o.beta,
            selected: o.selected.clone(),
            final_probabilities: o.supernet.thetas().iter().map(|t| edge_probabilities(t)).collect(),
        },
    )?;
    write_results(&dir.join("results.csv"), spec, &o.queue)
}

/// Writes `results.csv`: one row per queue entry with the bit-widths of
/// every block (0 for skipped blocks), cost, compression and test accuracy
/// (empty until trained, `failed` for diverged children).
pub fn write_results(path: &Path, spec: &SuperNetSpec, queue: &ArchQueue) -> Result<()> {
    let ids: Vec<&str> = spec.choice_blocks().map(|b| b.id.as_str()).collect();
    let mut header = vec!["arch_id".to_string(), "epoch_sampled".to_string()];
    header.extend(ids.iter().map(|i| format!("w_bits_{i}")));
    header.extend(ids.iter().map(|i| format!("a_bits_{i}")));
    header.extend(["cost", "compression", "test_accuracy"].map(String::from));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for e in &queue.entries {
        let mut row = vec![e.id.to_string(), e.epoch.to_string()];
        row.extend(
            e.architecture
                .blocks
                .iter()
                .map(|b| b.choice.weight_bits().unwrap_or(0).to_string()),
        );
        row.extend(
            e.architecture
                .blocks
                .iter()
                .map(|b| b.choice.act_bits().unwrap_or(0).to_string()),
        );
        row.push(e.cost.total.to_string());
        row.push(e.cost.compression.to_string());
        row.push(match (e.failed, e.accuracy) {
            (true, _) => "failed".into(),
            (false, Some(a)) => a.to_string(),
            (false, None) => String::new(),
        });
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Accuracy and mean cross entropy of a network on a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub cross_entropy: f64,
}

/// Index of the largest logit in each row; ties go to the lowest index.
pub fn predictions<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let c = *logits.shape().last().expect("logits have a class axis");
    logits
        .data()
        .chunks(c)
        .map(|row| (0..c).fold(0, |best, i| if row[i] > row[best] { i } else { best }))
        .collect()
}

/// Evaluates with batch-norm running statistics. Super nets need `arch`.
pub fn evaluate_full(
    net: &mut Network<f32>,
    data: &Dataset,
    arch: Option<&Architecture>,
    batch_size: usize,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0usize;
    let mut ce = 0.0;
    for idx in data.batches::<ChaCha8Rng>(batch_size.max(1), None) {
        let (x, labels) = data.batch(&idx);
        let logits = net.predict(&x, arch, BnMode::Eval)?;
        correct += predictions(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
        let mut tape = Tape::<f64>::new();
        let lv = tape.constant(logits.cast());
        let each = tape.softmax_cross_entropy_each(lv, &labels)?;
        ce += tape.value(each).data().iter().sum::<f64>();
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        cross_entropy: ce / data.len() as f64,
    })
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate(net: &mut Network<f32>, data: &Dataset, batch_size: usize) -> Result<f64> {
    Ok(evaluate_full(net, data, None, batch_size)?.accuracy)
}

pub struct ChildOutcome {
    pub network: Network<f32>,
    /// `None` when training diverged.
    pub evaluation: Option<Evaluation>,
    pub final_loss: f64,
}

impl ChildOutcome {
    pub fn failed(&self) -> bool {
        self.evaluation.is_none()
    }
}

/// Trains a child network for `arch` from scratch (or from `init_from` when
/// weight inheritance is enabled) with SGD, cosine decay and optional
/// cutout, then evaluates it on `test`. Divergence is reported through
/// [`ChildOutcome::failed`], not as an error.
pub fn train_child(
    spec: &SuperNetSpec,
    arch: &Architecture,
    train: &Dataset,
    test: &Dataset,
    cfg: &ChildConfig,
    init_from: Option<&Network<f32>>,
) -> Result<ChildOutcome> {
    cfg.validate()?;
    if let Some(size) = cfg.cutout {
        let [_, h, w] = spec.input;
        if size == 0 || size > h.min(w) {
            return Err(Error::invalid(format!(
                "cutout size {size} does not fit {h}x{w} images"
            )));
        }
    }
    let mut net = Network::<f32>::child(spec, arch, derive_seed(cfg.seed, STREAM_INIT))?;
    if cfg.inherit_weights {
        let sup = init_from.ok_or_else(|| Error::invalid("weight inheritance needs the super net"))?;
        net.copy_from_supernet(sup)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_WEIGHTS));
    let mut opt = Optimizer::sgd(cfg.optimizer.lr, cfg.optimizer.momentum, cfg.optimizer.weight_decay);
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.optimizer.lr, epoch as f64, cfg.epochs as f64);
        let mut total = 0.0;
        for idx in train.batches(cfg.batch_size, Some(&mut rng)) {
            let (mut x, labels) = train.batch(&idx);
            if let Some(size) = cfg.cutout {
                let per = x.len() / labels.len();
                for img in x.data_mut().chunks_mut(per) {
                    cutout_in_place(img, spec.input, size, &mut rng)?;
                }
            }
            let mut tape = Tape::<f32>::new();
            let bind = net
                .params()
                .bind(&mut tape, |k| matches!(k, ParamKind::Weight | ParamKind::Alpha));
            let xv = tape.constant(x);
            let logits = net.forward(&mut tape, &bind, xv, &[], BnMode::Train)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let lv = tape.value(loss).item() as f64;
            if !lv.is_finite() {
                return Ok(ChildOutcome {
                    network: net,
                    evaluation: None,
                    final_loss: lv,
                });
            }
            total += lv * labels.len() as f64;
            let mut grads = tape.backward(loss)?;
            let g = bind.gradients(&mut grads);
            opt.step(net.params_mut(), &g, lr);
            clamp_alphas(&mut net);
        }
        final_loss = total / train.len() as f64;
    }
    if !net.params().iter().all(|(_, _, t)| t.all_finite()) {
        return Ok(ChildOutcome {
            network: net,
            evaluation: None,
            final_loss,
        });
    }
    let evaluation = evaluate_full(&mut net, test, None, cfg.batch_size)?;
    Ok(ChildOutcome {
        network: net,
        evaluation: evaluation.accuracy.is_finite().then_some(evaluation),
        final_loss,
    })
}

/// Trains every queued architecture (child seed derived from the entry id)
/// and fills in the accuracies. Rewrites `results.csv` when `out` is given.
pub fn train_queue(
    queue: &mut ArchQueue,
    spec: &SuperNetSpec,
    train: &Dataset,
    test: &Dataset,
    cfg: &ChildConfig,
    supernet: Option<&Network<f32>>,
    out: Option<&Path>,
) -> Result<()> {
    for e in &mut queue.entries {
        let child_cfg = ChildConfig {
            seed: derive_seed(cfg.seed, e.id as u64),
            ..cfg.clone()
        };
        let r = train_child(spec, &e.architecture, train, test, &child_cfg, supernet)?;
        e.failed = r.failed();
        e.accuracy = r.evaluation.map(|v| v.accuracy);
    }
    if let Some(dir) = out {
        write_results(&dir.join("results.csv"), spec, queue)?;
    }
    Ok(())
}

/// Companion of a checkpoint file, stored next to it as `<stem>.json`, with
/// what is needed to rebuild the network the tensors belong to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub network: SuperNetSpec,
    /// `None` for a super net.
    pub architecture: Option<Architecture>,
}

pub fn sidecar_path(checkpoint: &Path) -> std::path::PathBuf {
    checkpoint.with_extension("json")
}

/// Writes the checkpoint and its sidecar.
pub fn save_network(net: &Network<f32>, path: &Path) -> Result<()> {
    crate::autodiff::checkpoint::save(net.params(), path)?;
    write_json(
        &sidecar_path(path),
        &CheckpointMeta {
            network: net.spec().clone(),
            architecture: net.architecture().cloned(),
        },
    )
}

/// Rebuilds a network from a checkpoint and its sidecar.
pub fn load_network(path: &Path) -> Result<Network<f32>> {
    let meta: CheckpointMeta = crate::config::load_json(&sidecar_path(path))?;
    let mut net = match &meta.architecture {
        Some(a) => Network::child(&meta.network, a, 0)?,
        None => Network::supernet(&meta.network, 0)?,
    };
    crate::autodiff::checkpoint::load_into(net.params_mut(), path)?;
    Ok(net)
}
