//! Training, inference and cross-validation of the three-stage pipeline.

mod config;
mod cv;
mod data;
mod model;
mod optim;

pub use config::{lr_schedule, rescaled_milestones, InputChannel, TrainConfig, Variant, PAPER_TOTAL_EPOCHS, SEED_ENV};
pub use cv::{
    assign_folds, cross_validate, cross_validate_with, dice_score, evaluate, history_csv, mean_dice, split_fold, train_epoch, train_to_end,
    CaseScore, CvReport, EpochRecord, FoldReport, HISTORY_CSV_HEADER,
};
pub use data::{
    assemble_generator_input, assemble_input, layout_tag, minmax, prepare_case, zscore_tensor, Batch, PreparedCase,
    Targets, GENERATOR_CHANNELS, ZSCORE_EPS,
};
pub use model::{derive_seed, Bindings, Inference, LossBreakdown, Losses, Outputs, PipelineState, MASK_THRESHOLD};
pub use optim::{rmsprop_step, RmsProp};
