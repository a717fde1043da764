//! Synthetic data, losses, the CIDEr-D scorer, optimizers and training loops.

pub mod cider;
pub mod losses;
pub mod optim;
pub mod scst;
pub mod shapeworld;
pub mod trainer;

pub use cider::{cider_d, CiderIndex, DEFAULT_SIGMA};
pub use losses::{kd_loss, token_hits, xe_loss};
pub use optim::{make_optimizer, Adam, Optimizer, OptimizerKind, Sgd};
pub use scst::{scst_gradients, scst_loss, sequence_logprob, strip_eos};
pub use shapeworld::{gen_shape_world, load_dataset, render_sample, sample_seed, save_dataset, ShapeWorldSample};
pub use trainer::{
    evaluate_loss, examples_from_samples, xe_gradients, greedy_exact_match, token_accuracy, train_loop,
    write_log_csv, Example, LogRow, LossMode, TrainReport, TrainingConfig,
};
