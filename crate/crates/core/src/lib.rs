pub mod artifacts;
pub mod client;
pub mod community;
pub mod flcore;
pub mod netproto;
pub mod orchestrator;
pub mod scenarios;
pub mod simulation;
pub mod tinylearn;

mod lenient_f64;
