//! Self-improving multi-agent text-to-image workflow.
//!
//! A user prompt is analyzed and refined by four LLM sub-agents, rendered by
//! an image model, scored by a vision-language evaluator and, while the score
//! stays below the threshold, corrected by an image-editing model. Finished
//! runs are condensed into node-wise successes and pitfalls and stored in a
//! knowledge base; once enough runs have accumulated, guidance synthesized
//! from the most similar past runs is injected into every agent.

pub mod agent;
pub mod backends;
pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod evaluator;
pub mod guidance;
pub mod memory;
pub mod orchestrator;
pub mod prompts;
pub mod trace;

pub use error::{Error, Result};
