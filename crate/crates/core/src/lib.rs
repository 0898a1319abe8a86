pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod cognition;
pub mod config;
pub mod curriculum;
pub mod decoder;
pub mod error;
pub mod evalbench;
pub mod framing;
pub mod io;
pub mod model;
pub mod params;
pub mod reflector;
pub mod repro;
pub mod synthesis;
pub mod synthworld;
pub mod training;
pub mod tensor;
pub mod types;
