pub mod baselines;
pub mod data;
pub mod env;
pub mod experiment;
pub mod nn;
pub mod safelayer;
pub mod sac;
