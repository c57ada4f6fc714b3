//! Ablation runner: loss-form x contrastive x prior switches over the
//! phantom task, one metrics row per (configuration, seed).

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::objective::{metrics_csv_header, metrics_csv_row, FocalParams, MetricsReport};

use super::phantom::{generate_phantoms, PhantomSpec};
use super::train::{evaluate, prepare_samples, train_prepared, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationAxes {
    pub bce: bool,
    pub focal: bool,
    pub contrastive: bool,
    pub gaussian: bool,
}

impl AblationAxes {
    pub fn name(&self) -> String {
        let mark = |b: bool| if b { "on" } else { "off" };
        format!(
            "bce-{}_focal-{}_contrastive-{}_gaussian-{}",
            mark(self.bce),
            mark(self.focal),
            mark(self.contrastive),
            mark(self.gaussian)
        )
    }

    /// Derive a concrete training config from the switches.
    pub fn apply(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.focal = if self.bce {
            FocalParams::bce()
        } else {
            base.focal
        };
        cfg.lambda = if self.contrastive { base.lambda } else { 0.0 };
        cfg.use_prior = self.gaussian;
        cfg.seed = seed;
        cfg.net.seed = seed;
        cfg
    }
}

/// The standard four-row grid: focal-only, BCE + prior, focal + prior, and
/// the full method.
pub fn standard_axes() -> Vec<AblationAxes> {
    vec![
        AblationAxes { bce: false, focal: true, contrastive: false, gaussian: false },
        AblationAxes { bce: true, focal: false, contrastive: false, gaussian: true },
        AblationAxes { bce: false, focal: true, contrastive: false, gaussian: true },
        AblationAxes { bce: false, focal: true, contrastive: true, gaussian: true },
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub axes: AblationAxes,
    pub seed: u64,
    pub best_epoch: usize,
    pub test: MetricsReport,
}

/// Train and evaluate every (axes, seed) pair. The phantom dataset is
/// regenerated per seed so each seed is an independent trial.
pub fn run_ablation(
    base: &TrainConfig,
    phantom: &PhantomSpec,
    variants: &[AblationAxes],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let spec = PhantomSpec { seed, ..phantom.clone() };
        let dataset = generate_phantoms(&spec)?;
        for axes in variants {
            let cfg = axes.apply(base, seed);
            let samples = prepare_samples(&dataset, &cfg)?;
            let outcome = train_prepared(&cfg, &samples)?;
            let test = evaluate(&outcome.params, &samples, &outcome.split.test, cfg.threshold)?;
            rows.push(AblationRow {
                axes: *axes,
                seed,
                best_epoch: outcome.best_epoch,
                test,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("bce,focal,contrastive,gaussian,seed,best_epoch,{}\n", metrics_csv_header());
    let mark = |b: bool| if b { "1" } else { "0" };
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            mark(row.axes.bce),
            mark(row.axes.focal),
            mark(row.axes.contrastive),
            mark(row.axes.gaussian),
            row.seed,
            row.best_epoch,
            metrics_csv_row(&row.test),
        ));
    }
    out
}

/// Median test AUC over the rows matching `axes` (missing AUCs count 0.5).
pub fn median_auc(rows: &[AblationRow], axes: &AblationAxes) -> Option<f64> {
    let mut aucs: Vec<f64> = rows
        .iter()
        .filter(|r| &r.axes == axes)
        .map(|r| r.test.auc.unwrap_or(0.5))
        .collect();
    if aucs.is_empty() {
        return None;
    }
    aucs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(aucs[aucs.len() / 2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axes_apply_switches() {
        let base = TrainConfig::default();
        let full = AblationAxes { bce: false, focal: true, contrastive: true, gaussian: true };
        let cfg = full.apply(&base, 7);
        assert_eq!(cfg.lambda, base.lambda);
        assert!(cfg.use_prior);
        assert_eq!(cfg.seed, 7);

        let bce = AblationAxes { bce: true, focal: false, contrastive: false, gaussian: true };
        let cfg = bce.apply(&base, 7);
        assert_eq!(cfg.focal.gamma, 0.0);
        assert_eq!(cfg.focal.alpha_f, 1.0);
        assert_eq!(cfg.lambda, 0.0);

        let no_prior = AblationAxes { bce: false, focal: true, contrastive: false, gaussian: false };
        assert!(!no_prior.apply(&base, 7).use_prior);
    }

    #[test]
    fn csv_has_one_row_per_configuration() {
        let axes = standard_axes();
        let rows: Vec<AblationRow> = axes
            .iter()
            .map(|a| AblationRow {
                axes: *a,
                seed: 1,
                best_epoch: 0,
                test: crate::objective::compute_metrics(&[0.9, 0.1], &[true, false], 0.5).unwrap(),
            })
            .collect();
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 1 + axes.len());
        assert!(csv.lines().nth(4).unwrap().starts_with("0,1,1,1"));
    }

    #[test]
    fn median_is_the_middle_seed() {
        let a = AblationAxes { bce: false, focal: true, contrastive: true, gaussian: true };
        let rows: Vec<AblationRow> = [0.9, 0.5, 0.7]
            .iter()
            .enumerate()
            .map(|(i, &auc)| AblationRow {
                axes: a,
                seed: i as u64,
                best_epoch: 0,
                test: crate::objective::compute_metrics(
                    &[auc, 1.0 - auc],
                    &[true, false],
                    0.5,
                )
                .map(|mut m| {
                    m.auc = Some(auc);
                    m
                })
                .unwrap(),
            })
            .collect();
        assert_eq!(median_auc(&rows, &a), Some(0.7));
    }
}
