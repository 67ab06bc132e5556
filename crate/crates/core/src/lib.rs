//! `sekit`: an engine for the entropy-regularized teacher-student objective
//!
//! ```text
//! min_{q, theta}  -alpha * H(q) + beta * D(q, p_theta) - E_q[f]
//! ```
//!
//! on finite domains, where every quantity is computed exactly. Classical
//! learning algorithms appear as configurations of `(alpha, beta, D, H, f)`;
//! see [`recipes`].

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adversarial;
pub mod dist;
pub mod divergence;
pub mod error;
pub mod experience;
pub mod extf64;
pub mod mdp;
pub mod models;
pub mod recipes;
pub mod rng;
pub mod solver;

pub use dist::{normalize_log, Dist, Domain, UncertaintyFn};
pub use error::{Error, Result};
pub use models::TargetModel;
