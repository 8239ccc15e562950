//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape: every primitive evaluates eagerly and
//! records its inputs, so node order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep. Learnable state lives in a
//! [`ParamStore`] outside the tape; parameters enter a graph as leaves and
//! leave it again as [`Gradients`].

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use gradcheck::{grad_check, smoothness_gap, GradCheckReport};
pub use graph::{pairwise_sq_dist_values, BnLayout, BnStats, Gradients, Graph, StatUpdate, Var, BN_EPS};
pub use params::{ParamEntry, ParamId, ParamKind, ParamStore};
pub use tensor::{Real, Tensor};
