//! Training loop, evaluator, throughput benchmark, ablation runner, and
//! attention-map export for the text spotting model.

pub mod ablate;
pub mod attnviz;
pub mod bench;
pub mod config;
pub mod eval;
pub mod optim;
pub mod train;
