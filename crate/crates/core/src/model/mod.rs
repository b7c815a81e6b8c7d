//! Speaker-embedding model: configuration, parameter storage and the network.

pub mod config;
pub mod names;
pub mod net;
pub mod store;

pub use config::ModelConfig;
pub use net::{asp_pool, se_forward, AspParams, BnMode, BnPlan, Forward, SeBlock, SpeakerNet};
pub use store::{Bound, ParameterStore};
