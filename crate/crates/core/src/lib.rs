//! Iterative PPO for outcome-driven conversations on enumerable synthetic
//! environments, with an exact dynamic-programming oracle.

pub mod env;
pub mod error;
pub mod harness;
pub mod iterate;
pub mod mdp;
pub mod oracle;
pub mod policy;
pub mod ppo;
pub mod q_eval;
pub mod responses;
pub mod trajectory_log;

pub use error::{Error, Result};

/// Version tag written into every persisted file.
pub const FORMAT_VERSION: u32 = 1;
