//! Stochastic super net: choice blocks over precision candidates, Gumbel-Softmax
//! masks, architecture sampling and child materialization.

pub mod arch;
pub mod candidate;
pub mod gumbel;
pub mod net;
pub mod spec;

pub use arch::{
    most_likely_architecture, sample_architecture, ArchMeta, Architecture, BlockChoice, BlockTheta, ThetaSnapshot,
};
pub use candidate::PrecisionCandidate;
pub use gumbel::{
    edge_probabilities, gumbel_noise, gumbel_softmax, sample_categorical, sample_soft_masks,
    sample_soft_masks_per_example, TemperatureSchedule, GUMBEL_EPS,
};
pub use net::Network;
pub use spec::{
    BlockTemplate, ChoiceBlockSpec, ConvLayerSpec, ConvShape, FeatureShape, LayerSpec, LinearSpec, SuperNetSpec,
};
