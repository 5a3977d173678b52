pub mod cli;
pub mod embedding;
pub mod error;
pub mod gallery;
pub mod metrics;
pub mod normal;
pub mod rng;
pub mod scoring;
pub mod simulate;
pub mod similarity;
pub mod theory;
pub mod vector;
