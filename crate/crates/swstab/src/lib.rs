//! Feedback design for discrete-time switched linear systems.
//!
//! This crate designs per-subsystem state feedbacks that make all
//! closed-loop matrices simultaneously upper-triangular in one orthogonal
//! basis with prescribed stable diagonals, which yields global uniform
//! exponential stability under arbitrary switching together with an
//! explicit common quadratic Lyapunov function.
//!
//! The pipeline, bottom to top:
//!
//! - [`linalg`]: rank-revealing primitives and subspace ([`linalg::SubspaceBasis`])
//!   arithmetic under an explicit [`linalg::TolerancePolicy`];
//! - [`model`]: validated system and design types plus their JSON wire forms;
//! - [`cea`]: the common-eigenvector-assignment kernel problem for one
//!   iteration;
//! - [`structural`]: assignable-subspace diagnostics and the a-priori
//!   genericity verdict;
//! - [`triangularize`]: the full deflation loop producing a
//!   [`model::FeedbackDesign`];
//! - [`verify`]: independent certification of a finished design, common
//!   quadratic Lyapunov function construction, and switched simulation;
//! - [`montecarlo`]: randomized experiments over system ensembles.

pub mod cea;
pub mod linalg;
pub mod model;
pub mod montecarlo;
mod seeds;
pub mod structural;
pub mod triangularize;
pub mod verify;
