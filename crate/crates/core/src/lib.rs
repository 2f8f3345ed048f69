//! Masked sensing plans for finite MDP controllers.
//!
//! The controller's average-cost plan is an occupation measure over
//! state-action pairs. An adversary watching the state-action trajectory
//! estimates the induced augmented chain by maximum likelihood; its
//! estimation accuracy is governed by the chain's Fisher information. The
//! maskers in [`masking`] trade operation-cost perturbation for a smaller
//! Fisher-information determinant, and [`adversary`] checks the effect by
//! simulation.

pub mod adversary;
pub mod error;
pub mod experiment;
pub mod fim;
pub mod linalg;
pub mod masking;
pub mod mdp;
pub mod optim;
pub mod radar_scenario;

pub use error::{Error, Result};
