//! Filter-wise partitioned pretraining (LoFT) at desk scale.
//!
//! The crate bundles a small dense tensor library, a one-hidden-layer
//! theory model with its NTK, the partitioned conv-stack trainer, rank
//! metrics for ticket emergence, a communication-cost simulator and the
//! experiment harness behind the `loft-lab` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod convstack;
pub mod distsim;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod loft;
pub mod metrics;
pub mod partition;
pub mod rng;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
