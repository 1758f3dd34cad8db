//! Attribute-classification pretraining and joint training with SGD,
//! momentum, weight decay and a step-decay learning-rate schedule.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::diffnet::ParamSet;
use crate::error::{Error, Result};
use crate::model::{ModelGradient, ModelState};
use crate::objective::{
    cls_pretrain_loss, total_loss, Batch, LossConfig, PretrainHeads, HEAD_HIDDEN,
};
use crate::schema::PersonCategory;

const SHUFFLE_STREAM: u64 = 1 << 32;
const PRETRAIN_STREAM: u64 = 2 << 32;
const HEAD_INIT_STREAM: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_image: f64,
    pub lr_category_and_w: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub seed: u64,
    pub pretrain_epochs: usize,
    /// Learning rate of the trunk and heads during pretraining.
    pub pretrain_lr: f64,
    /// Build the prototype table from each batch instead of from every
    /// training category.
    pub per_batch_categories: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            lr_image: 1e-3,
            lr_category_and_w: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_factor: 0.1,
            decay_every: 5,
            seed: 0,
            pretrain_epochs: 20,
            pretrain_lr: 1e-2,
            per_batch_categories: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_image", self.lr_image),
            ("lr_category_and_w", self.lr_category_and_w),
            ("pretrain_lr", self.pretrain_lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor {} outside (0, 1]",
                self.decay_factor
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rates of the two parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub image: f64,
    pub category_and_w: f64,
}

/// `base · decay_factor^⌊epoch / decay_every⌋` for each group.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> LearningRates {
    let steps = (epoch / cfg.decay_every.max(1)) as i32;
    let factor = cfg.decay_factor.powi(steps);
    LearningRates {
        image: cfg.lr_image * factor,
        category_and_w: cfg.lr_category_and_w * factor,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    /// Epochs completed so far.
    pub epoch: usize,
    pub lr: LearningRates,
    pub velocity: ModelGradient,
}

impl OptimizerState {
    pub fn new(state: &ModelState, cfg: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            lr: lr_schedule(0, cfg),
            velocity: state.zero_gradient(),
        }
    }
}

/// `v ← μv + (g + wd·θ); θ ← θ − lr·v`, block by block. `lr_of` maps a
/// block name to its learning rate.
pub fn sgd_update<P, G, V>(
    params: &mut P,
    grads: &G,
    velocity: &mut V,
    lr_of: impl Fn(&str) -> f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()>
where
    P: ParamSet + ?Sized,
    G: ParamSet + ?Sized,
    V: ParamSet + ?Sized,
{
    let grad_blocks = grads.blocks();
    for b in &grad_blocks {
        if let Some(i) = b.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of '{}' at index {i} is {}",
                b.name, b.values[i]
            )));
        }
    }
    let mut param_blocks = params.blocks_mut();
    let mut vel_blocks = velocity.blocks_mut();
    if param_blocks.len() != grad_blocks.len() || vel_blocks.len() != grad_blocks.len() {
        return Err(Error::Dimension {
            context: "parameter blocks",
            expected: param_blocks.len(),
            got: grad_blocks.len(),
        });
    }
    for ((p, g), v) in param_blocks
        .iter_mut()
        .zip(&grad_blocks)
        .zip(vel_blocks.iter_mut())
    {
        if p.name != g.name || p.name != v.name || p.values.len() != g.values.len()
            || p.values.len() != v.values.len()
        {
            return Err(Error::Data(format!(
                "block mismatch: parameter '{}' vs gradient '{}'",
                p.name, g.name
            )));
        }
        let lr = lr_of(&p.name);
        for ((theta, &grad), vel) in p.values.iter_mut().zip(g.values).zip(v.values.iter_mut()) {
            *vel = momentum * *vel + (grad + weight_decay * *theta);
            *theta -= lr * *vel;
        }
    }
    Ok(())
}

fn is_image_block(name: &str) -> bool {
    name.starts_with("image.")
}

/// One optimizer step on the full model with the learning rates stored in
/// `opt`.
pub fn sgd_step(
    state: &mut ModelState,
    grads: &ModelGradient,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    let lr = opt.lr;
    sgd_update(
        state,
        grads,
        &mut opt.velocity,
        |name| {
            if is_image_block(name) {
                lr.image
            } else {
                lr.category_and_w
            }
        },
        cfg.momentum,
        cfg.weight_decay,
    )?;
    if !state.all_finite() {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    Ok(())
}

/// Sample order of `epoch`: a seeded shuffle of `0..n`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    shuffled(n, seed, SHUFFLE_STREAM + epoch as u64)
}

fn shuffled(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Training rows of a dataset in a form the loops can slice cheaply.
struct TrainRows {
    features: Array2<f64>,
    categories: Vec<PersonCategory>,
}

fn train_rows(dataset: &Dataset) -> Result<TrainRows> {
    let samples: Vec<_> = dataset.samples_in(Split::Train).collect();
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    Ok(TrainRows {
        features: dataset.feature_matrix(samples.iter().copied()),
        categories: samples.iter().map(|s| s.category.clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    pub epochs: Vec<PretrainEpoch>,
    /// Per-group training accuracy of the heads after the final epoch.
    pub accuracy: Vec<f64>,
}

/// Trains the image encoder on per-group attribute classification through
/// temporary heads, which are dropped before returning.
pub fn pretrain(state: &mut ModelState, dataset: &Dataset, cfg: &TrainConfig) -> Result<PretrainReport> {
    cfg.validate()?;
    let rows = train_rows(dataset)?;
    let labels: Vec<Vec<usize>> = rows
        .categories
        .iter()
        .map(|c| dataset.schema.indices_of(c.bits()))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(HEAD_INIT_STREAM);
    let heads = PretrainHeads::glorot(
        state.embed_dim(),
        &HEAD_HIDDEN,
        &dataset.schema.group_sizes(),
        &mut rng,
    )?;
    let mut head_velocity = heads.zeros_like();
    let mut trunk_velocity = state.image_encoder.mlp().zeros_like();
    state.pretrain_heads = Some(heads);

    let n = rows.features.nrows();
    let mut epochs = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        let order = shuffled(n, cfg.seed, PRETRAIN_STREAM + epoch as u64);
        let mut weighted = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = rows.features.select(Axis(0), chunk);
            let y: Vec<Vec<usize>> = chunk.iter().map(|&i| labels[i].clone()).collect();
            let cache = state.image_encoder.forward_batch(x.view())?;
            let heads = state.pretrain_heads.as_mut().expect("heads present");
            let out = cls_pretrain_loss(cache.output.view(), heads, &y)?;
            let trunk_grad = state
                .image_encoder
                .backward_batch(&cache, out.grad_trunk.view())?;
            let heads = state.pretrain_heads.as_mut().expect("heads present");
            sgd_update(
                heads,
                &out.grad_heads,
                &mut head_velocity,
                |_| cfg.pretrain_lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
            sgd_update(
                state.image_encoder.mlp_mut(),
                &trunk_grad,
                &mut trunk_velocity,
                |_| cfg.pretrain_lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
            weighted += out.value * chunk.len() as f64;
        }
        let loss = weighted / n as f64;
        log::info!("pretrain epoch {epoch}: loss {loss:.6}");
        epochs.push(PretrainEpoch { epoch, loss });
    }

    let heads = state.pretrain_heads.take().expect("heads present");
    let cache = state.image_encoder.forward_batch(rows.features.view())?;
    let out = cls_pretrain_loss(cache.output.view(), &heads, &labels)?;
    let accuracy: Vec<f64> = out.correct.iter().map(|&c| c as f64 / n as f64).collect();
    log::info!("pretrain accuracy per group: {accuracy:?}");
    state.validate()?;
    Ok(PretrainReport { epochs, accuracy })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr_image: f64,
    pub lr_cat: f64,
    pub loss_total: f64,
    pub loss_ma: f64,
    pub asmr_value: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr_image,lr_cat,loss_total,loss_ma,asmr_value";

pub fn write_metrics_csv(metrics: &[EpochMetrics], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for m in metrics {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            m.epoch, m.lr_image, m.lr_cat, m.loss_total, m.loss_ma, m.asmr_value
        )?;
    }
    Ok(())
}

/// Loss components over the whole training split, every training
/// category as a prototype.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossSnapshot {
    pub total: f64,
    pub ma: f64,
    pub asmr: f64,
}

pub fn training_loss(state: &ModelState, dataset: &Dataset, loss_cfg: &LossConfig) -> Result<LossSnapshot> {
    let rows = train_rows(dataset)?;
    let table = dataset.categories_in(&[Split::Train]);
    let lookup: BTreeMap<&PersonCategory, usize> =
        table.iter().enumerate().map(|(i, c)| (c, i)).collect();
    let batch = Batch {
        features: rows.features,
        category_index: rows.categories.iter().map(|c| lookup[c]).collect(),
        category_table: &table,
    };
    let out = total_loss(state, &batch, loss_cfg)?;
    Ok(LossSnapshot {
        total: out.total,
        ma: out.ma,
        asmr: out.asmr,
    })
}

/// Joint training of both encoders and the Hamming weights.
///
/// Resumes from `opt` when given (its `epoch` counts completed epochs).
/// `on_epoch` runs after every epoch and may persist state; an error from
/// it aborts training.
pub fn train<F>(
    state: &mut ModelState,
    dataset: &Dataset,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    opt: Option<OptimizerState>,
    mut on_epoch: F,
) -> Result<(OptimizerState, Vec<EpochMetrics>)>
where
    F: FnMut(&EpochMetrics, &ModelState, &OptimizerState) -> Result<()>,
{
    cfg.validate()?;
    loss_cfg.validate()?;
    let rows = train_rows(dataset)?;
    let global_table = dataset.categories_in(&[Split::Train]);
    let global_lookup: BTreeMap<&PersonCategory, usize> =
        global_table.iter().enumerate().map(|(i, c)| (c, i)).collect();
    let mut opt = opt.unwrap_or_else(|| OptimizerState::new(state, cfg));
    let n = rows.features.nrows();
    let mut metrics = Vec::new();

    for epoch in opt.epoch..cfg.epochs {
        opt.lr = lr_schedule(epoch, cfg);
        let order = epoch_order(n, cfg.seed, epoch);
        let (mut total, mut ma, mut reg) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let features = rows.features.select(Axis(0), chunk);
            let local_table: Vec<PersonCategory>;
            let (table, index): (&[PersonCategory], Vec<usize>) = if cfg.per_batch_categories {
                let mut cats: Vec<PersonCategory> =
                    chunk.iter().map(|&i| rows.categories[i].clone()).collect();
                cats.sort();
                cats.dedup();
                local_table = cats;
                let index = chunk
                    .iter()
                    .map(|&i| {
                        local_table
                            .binary_search(&rows.categories[i])
                            .expect("category in batch table")
                    })
                    .collect();
                (&local_table, index)
            } else {
                let index = chunk
                    .iter()
                    .map(|&i| global_lookup[&rows.categories[i]])
                    .collect();
                (&global_table, index)
            };
            let batch = Batch {
                features,
                category_index: index,
                category_table: table,
            };
            let out = total_loss(state, &batch, loss_cfg)?;
            sgd_step(state, &out.grads, &mut opt, cfg)?;
            let w = chunk.len() as f64;
            total += out.total * w;
            ma += out.ma * w;
            reg += out.asmr * w;
        }
        opt.epoch = epoch + 1;
        let m = EpochMetrics {
            epoch,
            lr_image: opt.lr.image,
            lr_cat: opt.lr.category_and_w,
            loss_total: total / n as f64,
            loss_ma: ma / n as f64,
            asmr_value: reg / n as f64,
        };
        log::info!(
            "epoch {epoch}: total {:.6} ma {:.6} asmr {:.6}",
            m.loss_total,
            m.loss_ma,
            m.asmr_value
        );
        on_epoch(&m, state, &opt)?;
        metrics.push(m);
    }
    Ok((opt, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-15 * b.abs();
        let r0 = lr_schedule(0, &cfg);
        assert_eq!((r0.image, r0.category_and_w), (1e-3, 1e-2));
        for epoch in [5, 9] {
            let r = lr_schedule(epoch, &cfg);
            assert!(close(r.image, 1e-4) && close(r.category_and_w, 1e-3));
        }
        let r10 = lr_schedule(10, &cfg);
        assert!(close(r10.image, 1e-5));
    }

    #[test]
    fn vanilla_step() {
        let mut theta = vec![1.0];
        let mut v = vec![0.0];
        sgd_update(&mut theta, &vec![1.0], &mut v, |_| 0.1, 0.0, 0.0).unwrap();
        assert!((theta[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let mut theta = vec![0.0];
        let mut v = vec![0.0];
        sgd_update(&mut theta, &vec![1.0], &mut v, |_| 0.1, 0.9, 0.0).unwrap();
        assert!((theta[0] + 0.1).abs() < 1e-15);
        sgd_update(&mut theta, &vec![1.0], &mut v, |_| 0.1, 0.9, 0.0).unwrap();
        assert!((theta[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_decays_velocity_only() {
        let mut theta = vec![2.0, -3.0];
        let mut v = vec![1.0, -1.0];
        sgd_update(&mut theta, &vec![0.0, 0.0], &mut v, |_| 0.1, 0.5, 0.0).unwrap();
        assert_eq!(v, vec![0.5, -0.5]);
        assert_eq!(theta, vec![2.0 - 0.05, -3.0 + 0.05]);

        let mut still = vec![2.0, -3.0];
        let mut rest = vec![0.0, 0.0];
        sgd_update(&mut still, &vec![0.0, 0.0], &mut rest, |_| 0.1, 0.9, 0.0).unwrap();
        assert_eq!(still, vec![2.0, -3.0]);
    }

    #[test]
    fn weight_decay_contracts() {
        let mut theta = vec![2.0, -3.0];
        let mut v = vec![0.0, 0.0];
        sgd_update(&mut theta, &vec![0.0, 0.0], &mut v, |_| 0.1, 0.0, 0.5).unwrap();
        assert!((theta[0] - 2.0 * 0.95).abs() < 1e-15);
        assert!((theta[1] + 3.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut theta = vec![1.0];
        let mut v = vec![0.0];
        let err = sgd_update(&mut theta, &vec![f64::NAN], &mut v, |_| 0.1, 0.0, 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(theta, vec![1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { lr_image: 0.0, ..Default::default() },
            TrainConfig { decay_factor: 0.0, ..Default::default() },
            TrainConfig { decay_factor: 1.5, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn epoch_order_is_seeded() {
        assert_eq!(epoch_order(50, 3, 0), epoch_order(50, 3, 0));
        assert_ne!(epoch_order(50, 3, 0), epoch_order(50, 3, 1));
        assert_ne!(epoch_order(50, 3, 0), epoch_order(50, 4, 0));
        let mut sorted = epoch_order(50, 3, 0);
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
