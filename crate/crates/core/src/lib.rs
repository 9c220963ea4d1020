pub mod baselines;
pub mod control;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod perception;
pub mod tensor;
pub mod world;
