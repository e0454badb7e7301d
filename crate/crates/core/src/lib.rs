//! bitsteer: a desk-scale lab for targeted weight-bit-flip attacks on a
//! self-contained toy autoregressive language model.
//!
//! The pipeline: train the toy victim on a synthetic QA corpus, classify
//! candidate target keywords by their logits at the answer anchor step,
//! search weight bits by gradient-times-perturbation impact under a
//! layer-range constraint, re-rank the top candidates by an auxiliary
//! utility score, apply one winner bit per iteration until the chosen
//! keywords appear in the model's answers, and finally check the emitted
//! flip plan against a simulated DRAM fault profile for physical
//! placement feasibility.

pub mod bitcodec;
pub mod corpus;
pub mod dram;
pub mod engine;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod ranking;
pub mod search;

pub use error::{Error, Result};
