//! Pre-training and every fine-tuning procedure: baseline, L0-close
//! (frozen tensors), supermask, iterative pruning, and the head-only and
//! shuffled-weights controls.

mod check;
mod engine;
mod finetune;
mod optim;
mod pretrain;
mod record;

pub use check::{full_model_gradcheck, GradcheckSummary, LeafKind, TensorCheck};
pub use engine::{evaluate_examples, predict, predict_all};
pub use finetune::{
    finetune_baseline, finetune_iterative_prune, finetune_supermask, head_only_control,
    shuffled_control, FinetuneOutput, MaskMode, PruneEvent, RunOptions, ShuffledControl,
};
pub use optim::{Adam, OptimizerConfig};
pub use pretrain::{mask_tokens, pretrain, PretrainOptions, PretrainOutput};
pub use record::{RunRecord, StepRow, RUN_RECORD_HEADER};
