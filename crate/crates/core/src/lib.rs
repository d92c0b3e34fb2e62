pub mod config;
pub mod error;
mod fsutil;
pub mod harness;
pub mod scenario;
pub mod tokenizer;
pub mod encoder;
pub mod fusion;
pub mod model;
pub mod params;
pub mod flow;
pub mod training;
