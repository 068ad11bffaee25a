//! Two-stage optimization (pretrain with the combined objective, finetune
//! with the recognition loss alone), the training baselines, and the
//! experiment comparison grid.

mod adam;
mod matrix;
mod stage;

pub use adam::{AdamState, StepOutcome, BETA1, BETA2, EPSILON};
pub use matrix::{
    evaluate_full_shot, run_experiment_matrix, test_holdouts, AugChoice, CellResult,
    MatrixConfig, MatrixInputs, MatrixReport, Shot, TestHoldout,
};
pub use stage::{
    history_to_csv, train_stage, train_stage_on, validation_asr_loss, validation_greedy_wer,
    HistoryRow, Stage, TrainConfig, TrainMode, TrainState,
};
