//! Desk-scale training harness: configuration, data, optimizer, schedule,
//! metric logs, checkpoints, the training loop, and run comparison.

pub mod ablate;
pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod data;
pub mod metrics;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use ablate::{ablation_variants, AblationAxis};
pub use checkpoint::Checkpoint;
pub use compare::{compare_runs, Comparison};
pub use config::{RunConfig, TrainConfig};
pub use data::{detokenize, load_corpus, synthetic_corpus, tokenize, Batcher};
pub use metrics::{read_metrics, MetricsRecord, MetricsWriter};
pub use optim::{adamw_step, clip_grad_norm, AdamState, AdamWConfig};
pub use schedule::wsd_lr;
pub use trainer::{train, Trainer};
