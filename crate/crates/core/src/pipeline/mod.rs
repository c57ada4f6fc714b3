//! Phantom dataset generation, patient-level splitting, training, and the
//! ablation runner.

mod ablation;
pub mod phantom;
pub mod presets;
mod split;
mod train;

pub use ablation::{
    ablation_csv, median_auc, run_ablation, standard_axes, AblationAxes, AblationRow,
};
pub use phantom::{generate_phantoms, PhantomDataset, PhantomScan, PhantomSpec};
pub use split::{patient_split, validate_fractions, SplitIndices};
pub use train::{
    cosine_lr, evaluate, prepare_samples, score_samples, split_prepared, train, train_prepared,
    EpochRecord, PreparedSample, TrainConfig, TrainOutcome,
};
