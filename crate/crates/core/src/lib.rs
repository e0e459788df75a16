//! One-bit compressive-sensing federated learning over an analog
//! multiple-access channel.

pub mod bounds;
pub mod channel;
pub mod cs_codec;
pub mod error;
pub mod harness;
pub mod learner;
pub mod scheduler;
pub mod seed;

pub use error::{Error, Result};
