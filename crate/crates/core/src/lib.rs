//! Multi-task structure learning for multi-modal directed acyclic graphs.
//!
//! Each task observes a subset of a global set of variables. A variable may be
//! a scalar, a finite vector or a densely sampled curve; curves are embedded
//! through functional principal components. Every task gets its own linear
//! structural equation model, and tasks are tied together by a differentiable
//! penalty on the difference of their causal orders restricted to shared
//! nodes.
//!
//! Module map:
//!
//! - [`funcdata`]: quadrature, FPCA and interval averaging for curves.
//! - [`sem`]: block layout, embedding assembly, the block transition matrix
//!   and its edge weights.
//! - [`causal_diff`]: transitive causal matrices, the causal difference, its
//!   differentiable surrogate and gradients.
//! - [`learner`]: the augmented Lagrangian / Adam optimizer.
//! - [`benchgen`]: synthetic benchmark generation and recovery metrics.

pub mod benchgen;
pub mod causal_diff;
mod error;
pub mod funcdata;
pub mod learner;
pub mod sem;

pub use error::{Error, Result};
