//! End-to-end pipelines: pretrain, train, evaluate, and the six-arm
//! ablation sweep run under matched seeds.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelShape, ModelState};
use crate::objective::{LossConfig, Variant};
use crate::retrieval::{evaluate, EvalReport};
use crate::trainer::{pretrain, train, TrainConfig};

/// One arm of the ablation sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// No pretraining, no regularizer.
    Baseline,
    /// Pretraining, no regularizer.
    BaselinePretrain,
    /// Pretraining plus the regularizer in the given form.
    Regularized(Variant),
}

impl Arm {
    pub const ALL: [Arm; 6] = [
        Arm::Baseline,
        Arm::BaselinePretrain,
        Arm::Regularized(Variant::Full),
        Arm::Regularized(Variant::NoDelta),
        Arm::Regularized(Variant::UniformW),
        Arm::Regularized(Variant::L2normW),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::BaselinePretrain => "baseline+pretrain",
            Arm::Regularized(v) => v.name(),
        }
    }

    pub fn pretrains(self) -> bool {
        !matches!(self, Arm::Baseline)
    }

    /// Loss settings of this arm derived from the shared `base`.
    pub fn loss_config(self, base: &LossConfig) -> LossConfig {
        let mut cfg = base.clone();
        match self {
            Arm::Baseline | Arm::BaselinePretrain => {
                cfg.lambda = 0.0;
                cfg.regularizer = false;
            }
            Arm::Regularized(v) => {
                cfg.variant = v;
                cfg.regularizer = true;
            }
        }
        cfg
    }
}

/// `shape` with its input width taken from `dataset`.
pub fn shape_for(shape: &ModelShape, dataset: &Dataset) -> ModelShape {
    ModelShape {
        feature_dim: dataset.feature_dim(),
        ..shape.clone()
    }
}

/// Fresh state, optionally pretrained.
pub fn initial_state(
    shape: &ModelShape,
    dataset: &Dataset,
    train_cfg: &TrainConfig,
    with_pretrain: bool,
) -> Result<ModelState> {
    let mut state = ModelState::init(&shape_for(shape, dataset), &dataset.schema, train_cfg.seed)?;
    if with_pretrain && train_cfg.pretrain_epochs > 0 {
        pretrain(&mut state, dataset, train_cfg)?;
    }
    Ok(state)
}

/// Trains a copy of `start` and evaluates it.
pub fn train_and_evaluate(
    start: &ModelState,
    dataset: &Dataset,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
    ks: &[usize],
) -> Result<(ModelState, EvalReport)> {
    let mut state = start.clone();
    train(&mut state, dataset, loss_cfg, train_cfg, None, |_, _, _| Ok(()))?;
    let report = evaluate(&state, dataset, ks)?;
    Ok((state, report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub arm: Arm,
    pub seed: u64,
    pub split: String,
    pub ranks: Vec<(usize, f64)>,
    pub map: f64,
    pub spearman_rho: Option<f64>,
    /// Learned Hamming weights of the final state.
    #[serde(skip)]
    pub weights: Vec<f64>,
}

impl AblationRow {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.ranks.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

/// Runs every arm on `dataset` with `train_cfg.seed`. Arms that pretrain
/// share one pretrained starting state.
pub fn run_ablation(
    dataset: &Dataset,
    shape: &ModelShape,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
    ks: &[usize],
    split: &str,
) -> Result<Vec<AblationRow>> {
    let fresh = initial_state(shape, dataset, train_cfg, false)?;
    let mut pretrained = fresh.clone();
    if train_cfg.pretrain_epochs > 0 {
        pretrain(&mut pretrained, dataset, train_cfg)?;
    }
    let mut rows = Vec::with_capacity(Arm::ALL.len());
    for arm in Arm::ALL {
        let start = if arm.pretrains() { &pretrained } else { &fresh };
        let (state, report) =
            train_and_evaluate(start, dataset, &arm.loss_config(loss_cfg), train_cfg, ks)?;
        let metrics = report.split(split).ok_or_else(|| {
            Error::Data(format!("dataset has no samples in evaluation split '{split}'"))
        })?;
        log::info!(
            "seed {} {}: rank1 {:?} map {:.4}",
            train_cfg.seed,
            arm.name(),
            metrics.rank(1),
            metrics.map
        );
        rows.push(AblationRow {
            arm,
            seed: train_cfg.seed,
            split: split.into(),
            ranks: metrics.ranks.clone(),
            map: metrics.map,
            spearman_rho: report.diagnostic.spearman_rho,
            weights: state.hamming_weights.as_slice().to_vec(),
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], ks: &[usize], mut out: impl Write) -> std::io::Result<()> {
    let rank_cols: Vec<String> = ks.iter().map(|k| format!("rank{k}")).collect();
    writeln!(out, "variant,seed,split,{},map,spearman_rho", rank_cols.join(","))?;
    for r in rows {
        let ranks: Vec<String> = ks
            .iter()
            .map(|&k| r.rank(k).map(|v| v.to_string()).unwrap_or_default())
            .collect();
        let rho = r
            .spearman_rho
            .map_or_else(|| "undefined".to_string(), |v| v.to_string());
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.arm.name(),
            r.seed,
            r.split,
            ranks.join(","),
            r.map,
            rho
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arms_are_distinct_and_named() {
        let names: Vec<_> = Arm::ALL.iter().map(|a| a.name()).collect();
        assert_eq!(
            names,
            [
                "baseline",
                "baseline+pretrain",
                "full",
                "no_delta",
                "uniform_w",
                "l2norm_w"
            ]
        );
        let base = LossConfig::default();
        assert_eq!(Arm::Baseline.loss_config(&base).lambda, 0.0);
        assert!(!Arm::BaselinePretrain.loss_config(&base).regularizer);
        let nd = Arm::Regularized(Variant::NoDelta).loss_config(&base);
        assert_eq!((nd.variant, nd.lambda), (Variant::NoDelta, base.lambda));
    }
}
