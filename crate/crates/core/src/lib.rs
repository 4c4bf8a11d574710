//! CPU reference implementation of sparse mixture-of-experts dispatch.
//!
//! The crate is organised along the path a batch of tokens takes through one
//! MoE layer:
//!
//! - [`tensor`]: a small dense row-major `f64` matrix.
//! - [`gates`]: top-k, kTop1, hierarchical top-k, balanced assignment, hash
//!   and dense-to-sparse routing, all producing a [`gates::GateDecision`].
//! - [`layout`]: permutes token rows into expert-contiguous buffers and back.
//! - [`netsim`]: an N-node x G-device cluster with one NIC per node that runs
//!   vanilla and hierarchical AllToAll byte-exactly under an alpha-beta cost
//!   model.
//! - [`moe`]: the end-to-end forward pass tying the pieces together.

pub mod error;
pub mod gates;
pub mod layout;
pub mod moe;
pub mod netsim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Matrix;
