//! Bundled desk-scale run configurations. The JSON files under `configs/`
//! mirror these; a test keeps them in sync.

use crate::net::NetConfig;
use crate::prior::PriorParams;

use super::phantom::PhantomSpec;
use super::train::TrainConfig;

/// Phantom cohort for the end-to-end desk run: 64x64x32 grids, 150 patients,
/// one scan each, visible lesions, distractors on every negative.
pub fn desk_phantom() -> PhantomSpec {
    PhantomSpec {
        dims: (64, 64, 32),
        num_regions: 8,
        region_radius: 5.0,
        lesion_region: 0,
        lesion_delta: 3.0,
        lesion_radius: (2.0, 3.5),
        positive_prob: 0.5,
        negative_blob_prob: 1.0,
        noise_stddev: 1.0,
        patients: 150,
        scans_per_patient: (1, 1),
        seed: 41,
    }
}

/// Full-method training settings for the desk run.
pub fn desk_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 4,
        epochs: 20,
        lr_floor: 1e-6,
        patience: 4,
        grounding_k: 1,
        embed_dim: 64,
        lambda: 0.5,
        tau: 0.07,
        net: NetConfig {
            input_dims: (64, 64, 32),
            seed: 41,
            ..NetConfig::default()
        },
        prior: PriorParams::default(),
        seed: 41,
        ..TrainConfig::default()
    }
}

/// Smaller, harder task for the directional ablation: lower contrast and a
/// narrower network keep twelve training runs tractable.
pub fn ablation_phantom() -> PhantomSpec {
    PhantomSpec {
        dims: (32, 32, 16),
        num_regions: 8,
        region_radius: 3.5,
        lesion_region: 0,
        lesion_delta: 1.6,
        lesion_radius: (1.4, 2.4),
        positive_prob: 0.5,
        negative_blob_prob: 1.0,
        noise_stddev: 1.0,
        patients: 60,
        scans_per_patient: (1, 1),
        seed: 0,
    }
}

pub fn ablation_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 4,
        epochs: 12,
        lr_floor: 1e-6,
        patience: 12,
        grounding_k: 1,
        embed_dim: 64,
        lambda: 0.5,
        tau: 0.07,
        net: NetConfig {
            input_dims: (32, 32, 16),
            d_h: 32,
            embedding_dim: 128,
            head_hidden: 32,
            seed: 0,
            ..NetConfig::default()
        },
        prior: PriorParams::default(),
        seed: 0,
        ..TrainConfig::default()
    }
}

/// Null-signal control: identical cohort with the lesion contrast removed.
pub fn null_signal_phantom(seed: u64) -> PhantomSpec {
    PhantomSpec {
        lesion_delta: 0.0,
        seed,
        ..ablation_phantom()
    }
}
