//! Time-slotted simulation and analysis of fault-tolerant intersection
//! crossing for autonomous vehicles that combine on-board sensing with
//! unreliable vehicle-to-vehicle messaging.

pub mod analytics;
pub mod channel;
pub mod cli;
pub mod error;
pub mod kinematics;
pub mod protocol;
pub mod sim;

pub use error::{ConfigError, ModelError};
