//! Super nets and child networks.
//!
//! Both are a [`Network`]: a layer list plus a [`ParamStore`]. A super net
//! keeps every candidate of every choice block together with the block's
//! architecture logits; a child keeps only the selected candidate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::arch::Architecture;
use super::candidate::PrecisionCandidate;
use super::spec::{BlockTemplate, ConvShape, LayerSpec, SuperNetSpec};
use crate::autodiff::{Binding, BnMode, BnRunning, ParamId, ParamKind, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::quant::{dorefa_quantize, pact_activation, ALPHA_INIT, FULL_PRECISION};
use crate::tensor::{Real, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct BnParams {
    scale: ParamId,
    shift: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ConvParams {
    shape: ConvShape,
    weight: ParamId,
    bn: Option<BnParams>,
}

/// Parameters of one non-skip candidate.
#[derive(Clone, Debug)]
struct Body {
    template: BlockTemplate,
    convs: Vec<ConvParams>,
    /// One clipping bound per activation site when activations are quantized.
    alphas: Vec<ParamId>,
}

#[derive(Clone, Debug)]
struct Candidate {
    choice: PrecisionCandidate,
    body: Option<Body>,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv {
        conv: ConvParams,
        relu: bool,
    },
    Choice {
        id: String,
        theta: Option<ParamId>,
        candidates: Vec<Candidate>,
    },
    Pool,
    Linear {
        weight: ParamId,
        bias: Option<ParamId>,
    },
}

/// A super net (all candidates, with architecture logits) or a child network
/// (one candidate per block).
#[derive(Clone, Debug)]
pub struct Network<T> {
    spec: SuperNetSpec,
    arch: Option<Architecture>,
    layers: Vec<Layer>,
    params: ParamStore<T>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn kaiming<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        let fan_in: usize = shape[1..].iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        Tensor::from_fn(shape, |_| T::lit(normal.sample(&mut self.rng)))
    }

    fn uniform<T: Real>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let u = Uniform::new_inclusive(-bound, bound);
        Tensor::from_fn(shape, |_| T::lit(u.sample(&mut self.rng)))
    }
}

fn add_conv<T: Real>(
    store: &mut ParamStore<T>,
    init: &mut Init,
    prefix: &str,
    shape: ConvShape,
    bn: bool,
) -> Result<ConvParams> {
    let w = init.kaiming(&[shape.out_channels, shape.in_channels, shape.kernel, shape.kernel]);
    let weight = store.insert(format!("{prefix}.weight"), ParamKind::Weight, w)?;
    let bn = if bn {
        let c = [shape.out_channels];
        Some(BnParams {
            scale: store.insert(format!("{prefix}.bn.scale"), ParamKind::Weight, Tensor::ones(&c))?,
            shift: store.insert(format!("{prefix}.bn.shift"), ParamKind::Weight, Tensor::zeros(&c))?,
            mean: store.insert(format!("{prefix}.bn.mean"), ParamKind::Buffer, Tensor::zeros(&c))?,
            var: store.insert(format!("{prefix}.bn.var"), ParamKind::Buffer, Tensor::ones(&c))?,
        })
    } else {
        None
    };
    Ok(ConvParams { shape, weight, bn })
}

fn add_candidate<T: Real>(
    store: &mut ParamStore<T>,
    init: &mut Init,
    prefix: &str,
    template: BlockTemplate,
    choice: PrecisionCandidate,
) -> Result<Candidate> {
    if choice.is_skip() {
        return Ok(Candidate { choice, body: None });
    }
    let convs = template
        .convs()
        .into_iter()
        .enumerate()
        .map(|(i, shape)| add_conv(store, init, &format!("{prefix}.conv{}", i + 1), shape, true))
        .collect::<Result<Vec<_>>>()?;
    let alphas = if choice.act_bits() == Some(FULL_PRECISION) {
        Vec::new()
    } else {
        (0..template.activation_sites())
            .map(|i| {
                store.insert(
                    format!("{prefix}.alpha{}", i + 1),
                    ParamKind::Alpha,
                    Tensor::from_vec(vec![T::lit(ALPHA_INIT)]),
                )
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok(Candidate {
        choice,
        body: Some(Body {
            template,
            convs,
            alphas,
        }),
    })
}

impl<T: Real> Network<T> {
    /// Super net over every candidate, with all architecture logits at zero.
    pub fn supernet(spec: &SuperNetSpec, seed: u64) -> Result<Self> {
        Self::build(spec, None, seed)
    }

    /// Plain network holding only the candidates selected by `arch`, freshly
    /// initialized from `seed`.
    pub fn child(spec: &SuperNetSpec, arch: &Architecture, seed: u64) -> Result<Self> {
        Self::build(spec, Some(arch), seed)
    }

    fn build(spec: &SuperNetSpec, arch: Option<&Architecture>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let selected = arch.map(|a| a.indices(spec)).transpose()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut block = 0;
        for layer in &spec.layers {
            layers.push(match layer {
                LayerSpec::Conv(c) => Layer::Conv {
                    conv: add_conv(&mut store, &mut init, &c.name, c.conv, c.batchnorm)?,
                    relu: c.relu,
                },
                LayerSpec::Choice(b) => {
                    let layer = match &selected {
                        Some(sel) => {
                            let choice = b.candidates[sel[block]];
                            Layer::Choice {
                                id: b.id.clone(),
                                theta: None,
                                candidates: vec![add_candidate(&mut store, &mut init, &b.id, b.block, choice)?],
                            }
                        }
                        None => {
                            let candidates = b
                                .candidates
                                .iter()
                                .enumerate()
                                .map(|(j, &c)| {
                                    add_candidate(&mut store, &mut init, &format!("{}.c{j}", b.id), b.block, c)
                                })
                                .collect::<Result<Vec<_>>>()?;
                            let theta = store.insert(
                                format!("{}.theta", b.id),
                                ParamKind::Theta,
                                Tensor::zeros(&[b.candidates.len()]),
                            )?;
                            Layer::Choice {
                                id: b.id.clone(),
                                theta: Some(theta),
                                candidates,
                            }
                        }
                    };
                    block += 1;
                    layer
                }
                LayerSpec::Pool => Layer::Pool,
                LayerSpec::Linear(l) => {
                    let bound = 1.0 / (l.in_features as f64).sqrt();
                    let w = init.uniform(&[l.out_features, l.in_features], bound);
                    let weight = store.insert(format!("{}.weight", l.name), ParamKind::Weight, w)?;
                    let bias = if l.bias {
                        let b = init.uniform(&[l.out_features], bound);
                        Some(store.insert(format!("{}.bias", l.name), ParamKind::Weight, b)?)
                    } else {
                        None
                    };
                    Layer::Linear { weight, bias }
                }
            });
        }
        Ok(Network {
            spec: spec.clone(),
            arch: arch.cloned(),
            layers,
            params: store,
        })
    }

    pub fn spec(&self) -> &SuperNetSpec {
        &self.spec
    }

    /// The selected architecture of a child, `None` for a super net.
    pub fn architecture(&self) -> Option<&Architecture> {
        self.arch.as_ref()
    }

    pub fn is_supernet(&self) -> bool {
        self.arch.is_none()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Architecture-logit parameter of every choice block (super nets only).
    pub fn theta_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Choice { theta, .. } => *theta,
                _ => None,
            })
            .collect()
    }

    /// Current architecture logits, one vector per block.
    pub fn thetas(&self) -> Vec<Vec<f64>> {
        self.theta_ids()
            .into_iter()
            .map(|id| self.params.get(id).data().iter().map(|v| v.as_f64()).collect())
            .collect()
    }

    pub fn set_thetas(&mut self, thetas: &[Vec<f64>]) -> Result<()> {
        let ids = self.theta_ids();
        if ids.len() != thetas.len() {
            return Err(Error::invalid(format!(
                "{} theta vectors for {} blocks",
                thetas.len(),
                ids.len()
            )));
        }
        for (id, t) in ids.into_iter().zip(thetas) {
            let name = self.params.name(id).to_string();
            self.params
                .set(&name, Tensor::from_vec(t.iter().map(|&v| T::lit(v)).collect()))?;
        }
        Ok(())
    }

    /// Casts every stored tensor to another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            arch: self.arch.clone(),
            layers: self.layers.clone(),
            params: self.params.cast(),
        }
    }

    /// Copies the weights, batch-norm state and clipping bounds of the
    /// selected candidates out of `supernet` into this child.
    pub fn copy_from_supernet(&mut self, supernet: &Network<T>) -> Result<()> {
        let arch = self
            .arch
            .as_ref()
            .ok_or_else(|| Error::invalid("copy_from_supernet needs a child network"))?;
        if !supernet.is_supernet() || supernet.spec != self.spec {
            return Err(Error::invalid("source is not a super net of the same network"));
        }
        let indices = arch.indices(&self.spec)?;
        let ids: Vec<String> = self.spec.choice_blocks().map(|b| b.id.clone()).collect();
        for (name, _, _) in supernet.params.iter() {
            let target = match name.split_once('.') {
                Some((head, rest)) if ids.iter().any(|i| i == head) => {
                    let block = ids.iter().position(|i| i == head).expect("found above");
                    let Some((cand, tail)) = rest.split_once('.') else {
                        continue;
                    };
                    if cand != format!("c{}", indices[block]) {
                        continue;
                    }
                    format!("{head}.{tail}")
                }
                _ => name.to_string(),
            };
            if self.params.by_name(&target).is_some() {
                let value = supernet.params.by_name(name).expect("iterating").clone();
                self.params.set(&target, value)?;
            }
        }
        Ok(())
    }

    /// Number of choice blocks.
    pub fn num_blocks(&self) -> usize {
        self.spec.num_blocks()
    }

    /// Records the network on `tape` and returns the logits `[N, classes]`.
    ///
    /// `x` is `[N,C,H,W]`. A super net needs one mask per choice block, each
    /// `[K]` or `[N,K]`; a child ignores `masks`. Batch-norm running
    /// statistics are read from and, in [`BnMode::Train`], written back to
    /// the parameter store.
    pub fn forward(&mut self, tape: &mut Tape<T>, bind: &Binding, x: Var, masks: &[Var], mode: BnMode) -> Result<Var> {
        let trace = self.forward_trace(tape, bind, x, masks, mode)?;
        Ok(*trace.last().expect("validated networks have layers"))
    }

    /// Like [`Network::forward`] but returns the output of every layer.
    pub fn forward_trace(
        &mut self,
        tape: &mut Tape<T>,
        bind: &Binding,
        x: Var,
        masks: &[Var],
        mode: BnMode,
    ) -> Result<Vec<Var>> {
        if self.is_supernet() && masks.len() != self.num_blocks() {
            return Err(Error::invalid(format!(
                "{} masks for {} choice blocks",
                masks.len(),
                self.num_blocks()
            )));
        }
        let [c, h, w] = self.spec.input;
        let xs = tape.shape(x);
        if xs.len() != 4 || xs[1..] != [c, h, w] {
            return Err(Error::shape(format!(
                "network expects [N,{c},{h},{w}] input, got {xs:?}"
            )));
        }
        let mut h = x;
        let mut trace = Vec::with_capacity(self.layers.len());
        let mut block = 0;
        let layers = std::mem::take(&mut self.layers);
        let result = (|| {
            for layer in &layers {
                h = match layer {
                    Layer::Conv { conv, relu } => {
                        let y = self.conv_bn(tape, bind, h, conv, None, mode)?;
                        if *relu {
                            tape.relu(y)
                        } else {
                            y
                        }
                    }
                    Layer::Choice { candidates, .. } => {
                        let outs = candidates
                            .iter()
                            .map(|cand| self.candidate(tape, bind, h, cand, mode))
                            .collect::<Result<Vec<_>>>()?;
                        let out = if self.is_supernet() {
                            tape.mix(masks[block], &outs)?
                        } else {
                            outs[0]
                        };
                        block += 1;
                        out
                    }
                    Layer::Pool => tape.global_avg_pool(h)?,
                    Layer::Linear { weight, bias } => tape.linear(h, bind.var(*weight), bias.map(|b| bind.var(b)))?,
                };
                trace.push(h);
            }
            Ok(trace)
        })();
        self.layers = layers;
        result
    }

    fn conv_bn(
        &mut self,
        tape: &mut Tape<T>,
        bind: &Binding,
        x: Var,
        conv: &ConvParams,
        w_bits: Option<u32>,
        mode: BnMode,
    ) -> Result<Var> {
        let mut w = bind.var(conv.weight);
        if let Some(k) = w_bits {
            w = dorefa_quantize(tape, w, k)?;
        }
        let y = tape.conv2d(x, w, conv.shape.stride, conv.shape.padding)?;
        let Some(bn) = conv.bn else { return Ok(y) };
        let mut mean = self.params.get(bn.mean).data().to_vec();
        let mut var = self.params.get(bn.var).data().to_vec();
        let out = tape.batchnorm2d(
            y,
            bind.var(bn.scale),
            bind.var(bn.shift),
            BnRunning {
                mean: &mut mean,
                var: &mut var,
                momentum: T::lit(BN_MOMENTUM),
            },
            mode,
            T::lit(BN_EPS),
        )?;
        if mode == BnMode::Train {
            self.params.get_mut(bn.mean).data_mut().copy_from_slice(&mean);
            self.params.get_mut(bn.var).data_mut().copy_from_slice(&var);
        }
        Ok(out)
    }

    fn activation(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        x: Var,
        body: &Body,
        site: usize,
        a_bits: u32,
    ) -> Result<Var> {
        if a_bits == FULL_PRECISION {
            Ok(tape.relu(x))
        } else {
            pact_activation(tape, x, bind.var(body.alphas[site]), a_bits)
        }
    }

    fn candidate(&mut self, tape: &mut Tape<T>, bind: &Binding, x: Var, cand: &Candidate, mode: BnMode) -> Result<Var> {
        let Some(body) = &cand.body else { return Ok(x) };
        let w_bits = cand.choice.weight_bits().expect("non-skip");
        let a_bits = cand.choice.act_bits().expect("non-skip");
        let wq = (w_bits != FULL_PRECISION).then_some(w_bits);
        match body.template {
            BlockTemplate::Conv(_) => {
                let y = self.conv_bn(tape, bind, x, &body.convs[0], wq, mode)?;
                self.activation(tape, bind, y, body, 0, a_bits)
            }
            BlockTemplate::Residual {
                in_channels,
                out_channels,
                stride,
            } => {
                let y = self.conv_bn(tape, bind, x, &body.convs[0], wq, mode)?;
                let y = self.activation(tape, bind, y, body, 0, a_bits)?;
                let y = self.conv_bn(tape, bind, y, &body.convs[1], wq, mode)?;
                let short = if stride == 1 && in_channels == out_channels {
                    x
                } else {
                    tape.shortcut_pad(x, stride, out_channels)?
                };
                let y = tape.add(y, short)?;
                self.activation(tape, bind, y, body, 1, a_bits)
            }
        }
    }

    /// Convenience forward on a fresh tape with all parameters as constants.
    /// Super nets use the one-hot masks of `arch`.
    pub fn predict(&mut self, x: &Tensor<T>, arch: Option<&Architecture>, mode: BnMode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape, |_| false);
        let masks = match (self.is_supernet(), arch) {
            (true, Some(a)) => a
                .masks(&self.spec)?
                .into_iter()
                .map(|m| tape.constant(Tensor::from_vec(m.into_iter().map(T::lit).collect())))
                .collect(),
            (true, None) if self.num_blocks() > 0 => {
                return Err(Error::invalid("super-net prediction needs an architecture"))
            }
            _ => Vec::new(),
        };
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bind, xv, &masks, mode)?;
        Ok(tape.value(out).clone())
    }

    /// Block ids of the choice blocks, in order.
    pub fn block_ids(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Choice { id, .. } => Some(id.as_str()),
                _ => None,
            })
            .collect()
    }
}
