//! Counterfactual question-answering datasets built from a knowledge graph,
//! with evaluation, toy preference training, and token capture analyses.

pub mod client;
pub mod config;
pub mod dataset;
pub mod dpo;
pub mod eval;
pub mod kg;
pub mod manifest;
pub mod parallel;
pub mod pipeline;
pub mod sampler;
pub mod text;
pub mod textgen;
pub mod tokencap;
