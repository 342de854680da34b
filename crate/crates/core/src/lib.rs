//! Core library for speed- and time-conditioned in-hand reorientation on a
//! kinematic surrogate hand: SO(3) utilities, the surrogate environment,
//! reward functions, PPO, the learned pose estimator and evaluation.

// `!(x > y)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod env;
pub mod estimator;
pub mod evaluation;
pub mod error;
pub mod nn;
pub mod ppo;
pub mod rewards;
pub mod so3;
pub mod train;

pub use error::{EnvError, Error, Result, So3Error};
