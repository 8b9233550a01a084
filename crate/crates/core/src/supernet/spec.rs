//! Macro-architecture description of a super net.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::candidate::PrecisionCandidate;
use crate::autodiff::conv_out_dim;
use crate::error::{Error, Result};

/// Geometry of one convolution, enough to count its parameters and MACs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvShape {
    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            conv_out_dim(h, self.kernel, self.stride, self.padding)?,
            conv_out_dim(w, self.kernel, self.stride, self.padding)?,
        ))
    }
}

/// Fixed (never quantized, never searched) convolution layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub name: String,
    pub conv: ConvShape,
    #[serde(default = "yes")]
    pub batchnorm: bool,
    #[serde(default = "yes")]
    pub relu: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSpec {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    #[serde(default = "yes")]
    pub bias: bool,
}

/// Operator shared by every candidate of a choice block; candidates differ
/// only in precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BlockTemplate {
    /// conv -> batch-norm -> activation
    Conv(ConvShape),
    /// Basic residual block: two 3x3 convs with batch-norm, activation after
    /// the first conv and after the residual sum. The shortcut is the
    /// identity, or strided subsampling with zero-padded channels when the
    /// shape changes.
    Residual {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
}

impl BlockTemplate {
    /// Convolutions executed by a non-skip candidate, in order.
    pub fn convs(&self) -> Vec<ConvShape> {
        match *self {
            BlockTemplate::Conv(c) => vec![c],
            BlockTemplate::Residual {
                in_channels,
                out_channels,
                stride,
            } => vec![
                ConvShape {
                    in_channels,
                    out_channels,
                    kernel: 3,
                    stride,
                    padding: 1,
                },
                ConvShape {
                    in_channels: out_channels,
                    out_channels,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
            ],
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            BlockTemplate::Conv(c) => c.in_channels,
            BlockTemplate::Residual { in_channels, .. } => *in_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            BlockTemplate::Conv(c) => c.out_channels,
            BlockTemplate::Residual { out_channels, .. } => *out_channels,
        }
    }

    /// Number of activation sites in one candidate.
    pub fn activation_sites(&self) -> usize {
        match self {
            BlockTemplate::Conv(_) => 1,
            BlockTemplate::Residual { .. } => 2,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let mut hw = (h, w);
        for c in self.convs() {
            hw = c.out_hw(hw.0, hw.1)?;
        }
        Some(hw)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChoiceBlockSpec {
    pub id: String,
    pub block: BlockTemplate,
    pub candidates: Vec<PrecisionCandidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv(ConvLayerSpec),
    Choice(ChoiceBlockSpec),
    /// Global average pooling, `[N,C,H,W] -> [N,C]`.
    Pool,
    Linear(LinearSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperNetSpec {
    /// `[channels, height, width]` of one example.
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Tensor shape (without the batch axis) flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl SuperNetSpec {
    pub fn choice_blocks(&self) -> impl Iterator<Item = &ChoiceBlockSpec> {
        self.layers.iter().filter_map(|l| match l {
            LayerSpec::Choice(b) => Some(b),
            _ => None,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.choice_blocks().count()
    }

    /// Checks the layer chain and returns the input shape of every layer.
    pub fn validate(&self) -> Result<Vec<FeatureShape>> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("input dimensions must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        match (self.layers.first(), self.layers.last()) {
            (None, _) => return Err(Error::invalid("network has no layers")),
            (Some(LayerSpec::Choice(b)), _) | (_, Some(LayerSpec::Choice(b))) => {
                return Err(Error::invalid(format!(
                    "choice block `{}` cannot be the first or last layer",
                    b.id
                )))
            }
            _ => {}
        }
        let mut names = HashSet::new();
        let mut shape = FeatureShape::Spatial { c, h, w };
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shapes.push(shape);
            let at = |msg: String| Error::invalid(format!("layer {i}: {msg}"));
            shape = match (layer, shape) {
                (LayerSpec::Conv(spec), FeatureShape::Spatial { c, h, w }) => {
                    check_name(&spec.name, &mut names).map_err(at)?;
                    if spec.conv.in_channels != c {
                        return Err(at(format!("expects {} channels, got {c}", spec.conv.in_channels)));
                    }
                    let (h, w) = spec
                        .conv
                        .out_hw(h, w)
                        .ok_or_else(|| at("kernel does not fit input".into()))?;
                    FeatureShape::Spatial {
                        c: spec.conv.out_channels,
                        h,
                        w,
                    }
                }
                (LayerSpec::Choice(block), FeatureShape::Spatial { c, h, w }) => {
                    check_name(&block.id, &mut names).map_err(at)?;
                    if block.candidates.len() < 2 {
                        return Err(at(format!("block `{}` needs at least two candidates", block.id)));
                    }
                    let mut seen = HashSet::new();
                    for cand in &block.candidates {
                        cand.validate()?;
                        if !seen.insert(*cand) {
                            return Err(at(format!("block `{}` lists {cand} twice", block.id)));
                        }
                    }
                    if block.block.in_channels() != c {
                        return Err(at(format!(
                            "block `{}` expects {} channels, got {c}",
                            block.id,
                            block.block.in_channels()
                        )));
                    }
                    if let BlockTemplate::Residual {
                        in_channels,
                        out_channels,
                        stride,
                    } = block.block
                    {
                        if out_channels < in_channels || stride == 0 {
                            return Err(at(format!("block `{}`: bad residual geometry", block.id)));
                        }
                    }
                    let (ho, wo) = block
                        .block
                        .out_hw(h, w)
                        .ok_or_else(|| at("kernel does not fit input".into()))?;
                    let out = FeatureShape::Spatial {
                        c: block.block.out_channels(),
                        h: ho,
                        w: wo,
                    };
                    if block.candidates.iter().any(|c| c.is_skip()) && out != shape {
                        return Err(at(format!(
                            "block `{}` changes shape, so it cannot be skipped",
                            block.id
                        )));
                    }
                    out
                }
                (LayerSpec::Pool, FeatureShape::Spatial { c, .. }) => FeatureShape::Flat(c),
                (LayerSpec::Linear(spec), FeatureShape::Flat(f)) => {
                    check_name(&spec.name, &mut names).map_err(at)?;
                    if spec.in_features != f {
                        return Err(at(format!("expects {} features, got {f}", spec.in_features)));
                    }
                    FeatureShape::Flat(spec.out_features)
                }
                (_, s) => return Err(at(format!("layer cannot follow a tensor of shape {s:?}"))),
            };
        }
        if shape != FeatureShape::Flat(self.classes) {
            return Err(Error::invalid(format!(
                "network ends in {shape:?}, expected {} logits",
                self.classes
            )));
        }
        Ok(shapes)
    }

    /// CIFAR-style ResNet with `blocks_per_group` residual blocks in each of
    /// three groups (16, 32, 64 channels). `blocks_per_group = 3` is
    /// ResNet20. Every residual block is a choice block over `candidates`;
    /// skip is dropped from the two down-sampling blocks.
    pub fn cifar_resnet(blocks_per_group: usize, classes: usize, candidates: &[PrecisionCandidate]) -> Self {
        let mut layers = vec![LayerSpec::Conv(ConvLayerSpec {
            name: "stem".into(),
            conv: ConvShape {
                in_channels: 3,
                out_channels: 16,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            batchnorm: true,
            relu: true,
        })];
        let mut cin = 16;
        for (g, width) in [16usize, 32, 64].into_iter().enumerate() {
            for b in 0..blocks_per_group {
                let stride = if g > 0 && b == 0 { 2 } else { 1 };
                let reshapes = stride != 1 || cin != width;
                layers.push(LayerSpec::Choice(ChoiceBlockSpec {
                    id: format!("g{}b{}", g + 1, b + 1),
                    block: BlockTemplate::Residual {
                        in_channels: cin,
                        out_channels: width,
                        stride,
                    },
                    candidates: candidates
                        .iter()
                        .copied()
                        .filter(|c| !(reshapes && c.is_skip()))
                        .collect(),
                }));
                cin = width;
            }
        }
        layers.push(LayerSpec::Pool);
        layers.push(LayerSpec::Linear(LinearSpec {
            name: "fc".into(),
            in_features: 64,
            out_features: classes,
            bias: true,
        }));
        SuperNetSpec {
            input: [3, 32, 32],
            classes,
            layers,
        }
    }
}

impl SuperNetSpec {
    /// Small plain ConvNet: a stride-2 stem to `width` channels, `blocks`
    /// shape-preserving 3x3 conv choice blocks (`b1`, `b2`, ...), global
    /// pooling and a classifier.
    pub fn conv_chain(
        input: [usize; 3],
        classes: usize,
        width: usize,
        blocks: usize,
        candidates: &[PrecisionCandidate],
    ) -> Self {
        let conv = |cin, stride| ConvShape {
            in_channels: cin,
            out_channels: width,
            kernel: 3,
            stride,
            padding: 1,
        };
        let mut layers = vec![LayerSpec::Conv(ConvLayerSpec {
            name: "stem".into(),
            conv: conv(input[0], 2),
            batchnorm: true,
            relu: true,
        })];
        layers.extend((1..=blocks).map(|b| {
            LayerSpec::Choice(ChoiceBlockSpec {
                id: format!("b{b}"),
                block: BlockTemplate::Conv(conv(width, 1)),
                candidates: candidates.to_vec(),
            })
        }));
        layers.push(LayerSpec::Pool);
        layers.push(LayerSpec::Linear(LinearSpec {
            name: "fc".into(),
            in_features: width,
            out_features: classes,
            bias: true,
        }));
        SuperNetSpec { input, classes, layers }
    }
}

fn check_name(name: &str, seen: &mut HashSet<String>) -> std::result::Result<(), String> {
    if name.is_empty() || name.contains('.') {
        return Err(format!("name `{name}` must be non-empty and contain no dots"));
    }
    if !seen.insert(name.to_owned()) {
        return Err(format!("duplicate name `{name}`"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weight_candidates() -> Vec<PrecisionCandidate> {
        [0, 1, 2, 3, 4, 8, 32]
            .into_iter()
            .map(|b| PrecisionCandidate::from_weight_precision(b).unwrap())
            .collect()
    }

    #[test]
    fn resnet20_validates() {
        let spec = SuperNetSpec::cifar_resnet(3, 10, &weight_candidates());
        let shapes = spec.validate().unwrap();
        assert_eq!(spec.num_blocks(), 9);
        assert_eq!(shapes.last(), Some(&FeatureShape::Flat(64)));
        let down = spec.choice_blocks().find(|b| b.id == "g2b1").unwrap();
        assert!(down.candidates.iter().all(|c| !c.is_skip()));
        let plain = spec.choice_blocks().find(|b| b.id == "g2b2").unwrap();
        assert_eq!(plain.candidates.len(), 7);
    }

    #[test]
    fn rejects_choice_at_ends_and_illegal_skip() {
        let mut spec = SuperNetSpec::cifar_resnet(1, 10, &weight_candidates());
        let first = spec.layers.remove(0);
        assert!(spec.validate().is_err());
        spec.layers.insert(0, first);
        if let LayerSpec::Choice(b) = &mut spec.layers[2] {
            b.candidates.push(PrecisionCandidate::Skip);
        }
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("cannot be skipped"), "{err}");
    }

    #[test]
    fn rejects_single_candidate() {
        let mut spec = SuperNetSpec::cifar_resnet(1, 10, &weight_candidates());
        if let LayerSpec::Choice(b) = &mut spec.layers[1] {
            b.candidates.truncate(1);
        }
        assert!(spec.validate().is_err());
    }

    #[test]
    fn json_roundtrip() {
        let spec = SuperNetSpec::cifar_resnet(1, 10, &weight_candidates());
        let text = serde_json::to_string(&spec).unwrap();
        let back: SuperNetSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }
}
