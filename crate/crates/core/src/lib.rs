pub mod bench;
pub mod error;
pub mod metrics;
pub mod policy;
pub mod recal;
pub mod sink;
pub mod tensor;
pub mod world;
