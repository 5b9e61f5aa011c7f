//! Config-driven commands: dataset generation, training, two-stage
//! inference, the conditioning-mode ablation, and gradient
//! verification.

mod commands;
mod config;

pub use commands::{
    cmd_ablate, cmd_gen_data, cmd_grad_check, cmd_infer, cmd_train, thread_count, train_params,
    AblateReport, AblateRow, TrainOutcome, GRAD_CHECK_FAULT_ENV,
};
pub use config::{
    DatasetSection, Mode, ModelSection, PathsSection, RunConfig, SamplerSection, ScheduleSection,
    TrainingSection,
};
