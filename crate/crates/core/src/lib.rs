//! Zap stochastic Newton-Raphson, Zap Q-learning and the asymptotic
//! covariance analytics that motivate them.

pub mod bench;
pub mod covariance;
pub mod error;
pub mod mdp;
pub mod numerics;
pub mod qlearn;
pub mod sa;
pub mod stopping;
pub mod td;

pub use error::{Error, Result};
