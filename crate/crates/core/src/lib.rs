//! Stability-certified ε-greedy scheduling for a networked control loop with a
//! multiplexed, lossy channel, plus a DQN scheduler trained under it.
//!
//! [`model`] and [`markov`] describe the jump-linear system, [`stability`]
//! certifies exploration rates, [`sim`] rolls policies out and [`rl`] trains
//! Q-networks. [`cli`] backs the `muxncs` binary.

pub mod cli;
pub mod error;
pub mod linalg;
pub mod markov;
pub mod model;
pub mod rl;
pub mod sim;
pub mod stability;

pub use error::{Error, Result};
