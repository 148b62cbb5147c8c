//! Structural parameter learning and the alternating multi-stage trainer.

mod cccp;
mod joint;

pub use cccp::{
    cccp_train, complete_latent, config_loss_h, struct_objective, CccpOutcome, StructExample, StructTrainConfig,
};
pub use joint::{
    joint_train, parse_train_log, train_log_csv, write_train_log, JointConfig, LogRow, Stages, TrainState, LOG_FILE,
};
