//! Engine for LLM-assisted inductive qualitative coding: the annotation
//! model, embedding provider, alignment metrics, the sequential coder and
//! the evaluation lab.

pub mod annotation;
pub mod cluster;
pub mod coder;
pub mod embedding;
pub mod lab;
pub mod metrics;
pub mod prompt;
pub mod provider;
pub mod reconstruct;
