pub mod dataset;
pub mod dml;
pub mod error;
pub mod features;
pub mod inference;
pub mod nuisance;
pub mod projection;
pub mod sampling_model;
pub mod scores;
pub mod simgen;
pub mod solver;
