//! Sequential information-theoretic experimental design for parameter
//! estimation in ODE models.
//!
//! Each stage scores the candidate experiments by the kNN-estimated mutual
//! information between the parameters and the predicted observable, picks
//! one, and assimilates the resulting measurement with an ensemble Kalman
//! filter over the state augmented with the parameters.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod design;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod infotheory;
pub mod models;
pub mod seed;
pub mod selftest;

pub use error::{Error, Result};
