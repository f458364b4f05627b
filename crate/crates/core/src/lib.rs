//! End-to-end training of Koopman surrogate models embedded in a differentiable
//! economic MPC policy.

pub mod adgraph;
pub mod cstr_env;
pub mod error;
pub mod harness;
pub mod koopman;
pub mod mpc_layer;
pub mod par;
pub mod ppo;
pub mod shac;
#[cfg(test)]
mod test_support;

pub use error::{Error, Result};
