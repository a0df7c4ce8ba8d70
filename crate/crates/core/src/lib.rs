pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod rope;
pub mod train;
