//! Training loop, optimizer, evaluation, checkpoints and ablations.

pub mod config;
pub mod eval;
pub mod ablation;
pub mod checkpoint;
pub mod optim;
pub mod schedule;
pub mod train;

pub use ablation::{arms_for, run_ablation, run_arm, static_arms, video_arms, AblationTable, Arm, BenchmarkData};
pub use checkpoint::{
    load_checkpoint, load_inference_params, read_records, save_checkpoint, write_records, Record,
};
pub use config::{parse_assignments, parse_override, TrainConfig, TRAIN_KEYS};
pub use eval::{evaluate, evaluate_labels, predict, Confusion, EvalReport};
pub use optim::{clip_grad_norm, optimizer_step, AdamW, OptimState};
pub use schedule::lr_schedule;
pub use train::{
    metrics_line, train_step, train_step_static, train_step_video, train_until, TrainData, TrainState,
    METRICS_HEADER,
};
