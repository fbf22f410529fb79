//! Reasoning text-to-video retrieval over structured scene twins.

pub mod canonical;
pub mod embedding;
pub mod mask;
pub mod relations;
pub mod twin;
pub mod index;
pub mod trainer;
pub mod decomposer;
pub mod llm;
pub mod tools;
pub mod reasoner;
pub mod metrics;
pub mod bench;
pub mod engine;
