//! Stackelberg adversarial regularization (SALT) for small differentiable models.
//!
//! The follower perturbs inputs by a few steps of projected gradient ascent on a
//! smoothness regularizer; the leader (the model parameters) is trained with the
//! total derivative of its loss, including the path through the follower's
//! unrolled trajectory. The zero-sum VAT baseline and a label-using adversarial
//! training baseline share the same perturbation machinery.
//!
//! Modules:
//! - [`diffmodel`]: tanh MLP with analytic gradients in parameters and inputs.
//! - [`regularizers`]: KL and squared-difference smoothness regularizers.
//! - [`perturb`]: Gaussian init, norm-ball projections, one ascent step.
//! - [`vat`]: VAT and Adv baselines.
//! - [`salt`]: unroll tape, finite-difference HVPs, reverse adjoint, and the
//!   forward-mode Jacobian oracle.
//! - [`calibration`]: ECE and reliability-diagram bins.
//! - [`harness`]: datasets, optimizers, training loops, sweeps and file formats.

pub mod calibration;
pub mod diffmodel;
mod dual;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod perturb;
pub mod regularizers;
pub mod salt;
pub mod vat;

pub use error::{Error, Result};
