//! Differentiable search for per-layer bit widths of convolutional networks.
//!
//! A super net holds every candidate precision of each searchable block.
//! Gumbel-Softmax masks mix the candidates, so one optimizer trains the
//! weights while another trains the block logits against
//! `cross_entropy * beta * ln(cost)^gamma`. Architectures sampled from the
//! learned distribution are then trained from scratch as quantized children.
//!
//! ```
//! use dnas::cost::{CostTable, Objective};
//! use dnas::supernet::{Architecture, PrecisionCandidate, SuperNetSpec};
//!
//! let c: Vec<PrecisionCandidate> = ["w1a1", "w4a4", "full"].iter().map(|s| s.parse().unwrap()).collect();
//! let spec = SuperNetSpec::conv_chain([3, 16, 16], 10, 8, 3, &c);
//! let table = CostTable::new(&spec, Objective::Compute, false).unwrap();
//! let arch = Architecture::uniform(&spec, c[1]).unwrap();
//! let report = table.report(&spec, &arch).unwrap();
//! assert!(report.compression > 1.0);
//! ```
//!
//! The guide in `book/` walks through each module; its code blocks run as
//! doc-tests of this crate.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod oracle;
pub mod pipeline;
pub mod quant;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/tensors-and-gradients.md")]
    struct TensorsAndGradients;
    #[doc = include_str!("../../../book/src/quantizers.md")]
    struct Quantizers;
    #[doc = include_str!("../../../book/src/super-net.md")]
    struct SuperNet;
    #[doc = include_str!("../../../book/src/cost-model.md")]
    struct CostModel;
    #[doc = include_str!("../../../book/src/search.md")]
    struct Search;
    #[doc = include_str!("../../../book/src/oracle.md")]
    struct Oracle;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
