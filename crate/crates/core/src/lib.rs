pub mod cli;
pub mod curriculum;
pub mod encoding;
pub mod generator;
pub mod graph;
pub mod io;
pub mod kernel;
pub mod runtime;
pub mod training;
