//! Synthetic tasks, metrics, reports and the command-line pipeline.

pub mod cli;
pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod pipeline;

pub use data::{generate_task, TaskData, TaskKind, TaskSpec};
pub use metrics::{corpus_bleu, corpus_bleu_smoothed, EvalReport};
pub use pipeline::{beam_sweep, translate, Decoder};
