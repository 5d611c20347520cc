//! Teacher pretraining, recognition pretraining, joint embedding training
//! and the scenario matrix.

pub mod fit;
pub mod matrix;
pub mod pretrain;
pub mod scenario;

pub use fit::{
    evaluate, fit, mask_tokens, AugmentConfig, Evaluation, FitOptions, FitOutcome, History, HistoryRow, Item,
    Objective, Phase,
};
pub use matrix::{matrix_csv, run_matrix, MatrixCell};
pub use pretrain::{
    pretrain_asr, pretrain_teacher, validation_wer, AsrReport, AsrSnapshot, AsrTrainConfig, TeacherReport,
    TeacherTrainConfig,
};
pub use scenario::{
    initial_bundle, train_joint, JointBudget, JointOutcome, TeacherTargets, TrainScenario, Trainable, TRAINED_SCENARIOS,
};
