//! Model-based policy-gradient training for active multi-target tracking
//! with a limited-field-of-view sensor.
//!
//! An agent with SE(3) kinematics carries a triangular sensor footprint and
//! tracks several targets with linear Gaussian dynamics. Beliefs are
//! maintained by a Kalman filter in information form; a probit relaxation of
//! the footprint makes the information update differentiable in the agent
//! pose, and the gradient of the terminal log-det-information reward is
//! propagated analytically through the rollout. Policies are small
//! attention-pooled networks that handle a variable number of targets via
//! padding and masking.

// `!(x > 0.0)` rejects NaN along with non-positive values; `x <= 0.0` would
// let NaN through. Indexed loops are the house style of the numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod belief;
pub mod cli;
pub mod config;
pub mod error;
pub mod fov;
pub mod gradcheck;
pub mod gradient;
pub mod liegroup;
pub mod policy;
pub mod rng;
pub mod sim;
pub mod trainer;

pub use error::{Error, Result};
