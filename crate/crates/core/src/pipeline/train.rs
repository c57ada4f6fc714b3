//! Training loop: Adam with cosine-annealed learning rate, focal +
//! supervised-contrastive objective, patient-level splits, validation-AUC
//! early stopping.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{add, scale, Graph, Tensor};
use crate::error::{Error, Result};
use crate::grounding::{build_table_from_registry, top_k, PhraseQuery};
use crate::net::{self, ModelParams, NetConfig};
use crate::objective::{
    compute_metrics, focal_loss_op, supcon_loss_op, FocalParams, MetricsReport,
};
use crate::prior::{build_prior_channel, PriorParams};
use crate::rng::Rng;
use crate::volgrid::{zscore_normalize, Volume3D};

use super::phantom::{PhantomDataset, PhantomScan};
use super::split::{patient_split, validate_fractions, SplitIndices};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_floor: f64,
    pub patience: usize,
    pub fractions: (f64, f64, f64),
    pub focal: FocalParams,
    pub tau: f64,
    pub lambda: f64,
    /// Top-K used when grounding phrases into prior regions.
    pub grounding_k: usize,
    /// Toy embedder dimensionality.
    pub embed_dim: usize,
    /// When false, channel 2 is all zeros (prior ablation).
    pub use_prior: bool,
    pub threshold: f64,
    pub net: NetConfig,
    pub prior: PriorParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 100,
            lr_floor: 1e-6,
            patience: 10,
            fractions: (0.70, 0.15, 0.15),
            focal: FocalParams::default(),
            tau: 0.07,
            lambda: 0.5,
            grounding_k: 5,
            embed_dim: 64,
            use_prior: true,
            threshold: 0.5,
            net: NetConfig::default(),
            prior: PriorParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_fractions(self.fractions)?;
        self.focal.validate()?;
        self.net.validate()?;
        if self.lambda > 0.0 && self.batch_size < 2 {
            return Err(Error::Contract(
                "batch size must be >= 2 when lambda > 0".into(),
            ));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Contract(format!("invalid lambda {}", self.lambda)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Contract(format!("invalid tau {}", self.tau)));
        }
        if self.learning_rate <= 0.0 || self.lr_floor < 0.0 || self.lr_floor > self.learning_rate {
            return Err(Error::Contract("invalid learning-rate schedule".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.grounding_k == 0 {
            return Err(Error::Contract("epochs, batch size, and k must be >= 1".into()));
        }
        if self.embed_dim < 8 {
            return Err(Error::Contract("embed_dim must be >= 8".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Contract(format!("invalid threshold {}", self.threshold)));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr0` at epoch 0 down to `floor` at the final epoch.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64, floor: f64) -> f64 {
    if total_epochs <= 1 {
        return lr0;
    }
    let t = epoch as f64 / (total_epochs as f64 - 1.0);
    floor + (lr0 - floor) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// Normalized MRI plus the prior channel, ready to enter the network.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub mri: Volume3D,
    pub prior: Volume3D,
    pub label: bool,
    pub patient: String,
}

/// Z-score the MRI channel and run the phrase -> grounding -> prior path for
/// channel 2 (all zeros when the prior is disabled).
pub fn prepare_samples(dataset: &PhantomDataset, cfg: &TrainConfig) -> Result<Vec<PreparedSample>> {
    cfg.validate()?;
    if dataset.scans.is_empty() {
        return Err(Error::Contract("dataset is empty".into()));
    }
    let table = build_table_from_registry(&dataset.scans[0].labels, cfg.embed_dim)?;
    dataset
        .scans
        .par_iter()
        .map(|scan| {
            let (mri, _) = zscore_normalize(&scan.mri)?;
            let prior = if cfg.use_prior {
                let mut selected = Vec::new();
                for phrase in &scan.phrases {
                    let q = PhraseQuery::from_phrase(phrase, cfg.embed_dim)?;
                    let (grounding, _) = top_k(&q, &table, cfg.grounding_k)?;
                    selected.extend(grounding.ranked.iter().map(|(id, _)| *id));
                }
                selected.sort_unstable();
                selected.dedup();
                build_prior_channel(&scan.labels, &selected, &cfg.prior)?.0
            } else {
                Volume3D::zeros(scan.mri.dims, scan.mri.spacing)
            };
            Ok(PreparedSample {
                mri,
                prior,
                label: scan.label,
                patient: scan.patient.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: MetricsReport,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    pub split: SplitIndices,
    /// Epoch whose checkpoint was returned.
    pub best_epoch: usize,
}

struct AdamState {
    t: usize,
    slots: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    fn new(params: &ModelParams) -> Self {
        let slots = params
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), (vec![0.0; t.data.len()], vec![0.0; t.data.len()])))
            .collect();
        AdamState { t: 0, slots }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Vec<f64>>, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for (name, tensor) in params.tensors.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = self.slots.get_mut(name).expect("slot exists");
            for i in 0..tensor.data.len() {
                m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                tensor.data[i] -= lr * mh / (vh.sqrt() + EPS);
            }
        }
    }
}

/// Score every sample in `indices` with the current parameters.
pub fn score_samples(
    params: &ModelParams,
    samples: &[PreparedSample],
    indices: &[usize],
) -> Result<(Vec<f64>, Vec<bool>)> {
    let scores: Vec<f64> = indices
        .par_iter()
        .map(|&i| net::predict(&samples[i].mri, &samples[i].prior, params, 0.5).map(|(_, p)| p))
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = indices.iter().map(|&i| samples[i].label).collect();
    Ok((scores, labels))
}

pub fn evaluate(
    params: &ModelParams,
    samples: &[PreparedSample],
    indices: &[usize],
    threshold: f64,
) -> Result<MetricsReport> {
    let (scores, labels) = score_samples(params, samples, indices)?;
    compute_metrics(&scores, &labels, threshold)
}

fn batch_loss(
    cfg: &TrainConfig,
    graph: &Graph,
    bound: &net::BoundParams,
    samples: &[PreparedSample],
    batch: &[usize],
) -> Result<Tensor> {
    let mut focal_terms: Option<Tensor> = None;
    let mut zhats = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for &i in batch {
        let s = &samples[i];
        let x = net::input_tensor(graph, &s.mri, &s.prior)?;
        let out = net::forward(&x, bound, &cfg.net)?;
        let term = focal_loss_op(&out.p, s.label, &cfg.focal)?;
        focal_terms = Some(match focal_terms {
            None => term,
            Some(acc) => add(&acc, &term)?,
        });
        zhats.push(out.zhat);
        labels.push(s.label);
    }
    let focal_mean = scale(&focal_terms.expect("nonempty batch"), 1.0 / batch.len() as f64);
    if cfg.lambda > 0.0 && batch.len() >= 2 {
        match supcon_loss_op(&zhats, &labels, cfg.tau) {
            Ok(supcon) => add(&scale(&supcon, cfg.lambda), &focal_mean),
            // single-class batches carry no contrastive signal
            Err(Error::DegenerateBatch(_)) => Ok(focal_mean),
            Err(e) => Err(e),
        }
    } else {
        Ok(focal_mean)
    }
}

/// Train on the patient-level train split, validating each epoch; returns
/// the best-validation checkpoint and the per-epoch log.
pub fn train(cfg: &TrainConfig, dataset: &PhantomDataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let samples = prepare_samples(dataset, cfg)?;
    train_prepared(cfg, &samples)
}

pub fn train_prepared(cfg: &TrainConfig, samples: &[PreparedSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let split = split_prepared(samples, cfg.fractions, cfg.seed)?;
    if split.val.is_empty() {
        return Err(Error::Split("validation split is empty".into()));
    }

    let mut net_cfg = cfg.net.clone();
    net_cfg.input_dims = samples[0].mri.dims;
    let mut params = ModelParams::init(&net_cfg)?;
    params.config = net_cfg.clone();
    let mut adam = AdamState::new(&params);
    let mut shuffle_rng = Rng::new(cfg.seed ^ 0x5eed_1234);

    let mut log: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(f64, ModelParams, usize)> = None;
    let mut stall = 0usize;

    let mut order: Vec<usize> = split.train.clone();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.learning_rate, cfg.lr_floor);
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let graph = Graph::new();
            let bound = net::bind(&graph, &params);
            let loss = batch_loss(cfg, &graph, &bound, samples, batch)?;
            let value = loss.scalar();
            if !value.is_finite() {
                return Err(Error::TrainingDiverged { epoch, batch: bi });
            }
            epoch_loss += value * batch.len() as f64;
            seen += batch.len();
            let mut grads = graph.backward(&loss)?;
            let mut named = BTreeMap::new();
            for (name, tensor) in &bound.tensors {
                if let Some(g) = grads.take(tensor) {
                    named.insert(name.clone(), g);
                }
            }
            adam.step(&mut params, &named, lr);
        }
        let train_loss = epoch_loss / seen.max(1) as f64;
        let val = evaluate(&params, samples, &split.val, cfg.threshold)?;
        let val_auc = val.auc.unwrap_or(0.5);
        log.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val,
        });

        let improved = match &best {
            None => true,
            Some((best_auc, _, _)) => val_auc > best_auc + 1e-4,
        };
        if improved {
            best = Some((val_auc, params.clone(), epoch));
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_params, best_epoch) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params: best_params,
        log,
        split,
        best_epoch,
    })
}

/// Patient split over prepared samples (same rule as `patient_split`).
pub fn split_prepared(
    samples: &[PreparedSample],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitIndices> {
    // reuse the scan-based splitter through a thin shim
    let shim: Vec<PhantomScan> = samples
        .iter()
        .map(|s| PhantomScan {
            mri: Volume3D::zeros((1, 1, 1), (1.0, 1.0, 1.0)),
            labels: crate::volgrid::LabelMap::new(
                (1, 1, 1),
                (1.0, 1.0, 1.0),
                vec![0],
                BTreeMap::new(),
            )
            .expect("trivial label map"),
            phrases: Vec::new(),
            label: s.label,
            patient: s.patient.clone(),
        })
        .collect();
    patient_split(&shim, fractions, seed)
}
