//! Window-controlled multi-class queueing networks.
//!
//! Routes inject packets through per-route congestion windows whose rates
//! derive from concave utilities by convex conjugacy. The crate provides:
//!
//! - [`model`]: topology, disciplines, utilities, and window-rate machinery;
//! - [`exact`]: product-form stationary tables, exact throughput, and an
//!   independent generator-solve oracle;
//! - [`simulate`]: event-driven simulation of the detailed positional state;
//! - [`optimize`]: the capacity-constrained utility problem, KKT
//!   certification, entropy objectives, and dual reconstruction;
//! - [`cli`]: model files, experiment orchestration, and text emission.
//!
//! The headline phenomenon: as the congestion level `c` grows, stationary
//! per-route throughput converges to the utility-optimal bandwidth
//! allocation, and the scaled state concentrates on the dual-optimal point.

// Negated float comparisons are deliberate: `!(x > 0.0)` rejects NaN where
// `x <= 0.0` would let it through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod exact;
pub mod model;
pub mod optimize;
pub mod simulate;

pub use error::{Error, Result};
