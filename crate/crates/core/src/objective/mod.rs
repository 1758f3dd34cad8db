//! Training objectives: the alignment loss, the semantic margin regularizer,
//! their weighted sum, and the attribute-classification pretraining loss.

mod alignment;
mod pretrain;
mod semantic;

use std::f64::consts::FRAC_PI_4;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use alignment::{ma_loss, AlignmentOutput, ARCCOS_EPS, UNIT_NORM_TOL};
pub use pretrain::{cls_pretrain_loss, ClassificationOutput, PretrainHeads, HEAD_HIDDEN};
pub use semantic::{
    asmr, asmr_from_similarities, delta, mu, uniform_weight, AsmrOutput, HammingWeights,
};

use crate::error::{Error, Result};
use crate::model::{ModelGradient, ModelState};
use crate::schema::PersonCategory;

/// Which form of the regularizer to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Learnable weighted-Hamming δ.
    #[default]
    Full,
    /// δ removed: plain mean-centered similarity spread.
    NoDelta,
    /// δ with every weight frozen at its uniform initial value.
    UniformW,
    /// δ evaluated with `w / |w|`.
    L2normW,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoDelta,
        Variant::UniformW,
        Variant::L2normW,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDelta => "no_delta",
            Variant::UniformW => "uniform_w",
            Variant::L2normW => "l2norm_w",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Logit scale σ.
    pub sigma: f64,
    /// Additive angular margin γ in radians.
    pub gamma: f64,
    /// Regularizer weight λ.
    pub lambda: f64,
    pub variant: Variant,
    /// When false the regularizer is never evaluated.
    pub regularizer: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::preset("peta").expect("builtin preset")
    }
}

impl LossConfig {
    /// `(λ, σ, γ)` tuned per benchmark: `peta`, `market`, `pa100k`.
    pub fn preset(name: &str) -> Result<Self> {
        let (lambda, sigma, gamma) = match name {
            "peta" => (4.0, 32.0, 0.1),
            "market" => (6.0, 12.0, 0.2),
            "pa100k" => (5.0, 48.0, 0.1),
            other => return Err(Error::Config(format!("unknown preset '{other}'"))),
        };
        Ok(Self {
            sigma,
            gamma,
            lambda,
            variant: Variant::Full,
            regularizer: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(0.0..=FRAC_PI_4).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma must lie in [0, π/4], got {}",
                self.gamma
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// One optimization step's worth of data.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    /// One feature vector per row.
    pub features: Array2<f64>,
    /// Row → index into `category_table`.
    pub category_index: Vec<usize>,
    /// Deduplicated prototype categories.
    pub category_table: &'a [PersonCategory],
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: f64,
    pub ma: f64,
    /// Regularizer value (0 when disabled).
    pub asmr: f64,
    pub grads: ModelGradient,
}

/// Stacks category bit vectors into a matrix, one row per category.
pub fn category_matrix(categories: &[PersonCategory]) -> Array2<f64> {
    let dim = categories.first().map_or(0, PersonCategory::dim);
    let mut out = Array2::zeros((categories.len(), dim));
    for (mut row, c) in out.rows_mut().into_iter().zip(categories) {
        for (v, &b) in row.iter_mut().zip(c.bits()) {
            *v = f64::from(b);
        }
    }
    out
}

/// `L_MA + λ·R` with gradients for both encoders and the Hamming weights.
pub fn total_loss(state: &ModelState, batch: &Batch<'_>, cfg: &LossConfig) -> Result<TotalLoss> {
    cfg.validate()?;
    if batch.features.nrows() == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if batch.category_table.is_empty() {
        return Err(Error::Data("empty category table".into()));
    }
    let f_cache = state.image_encoder.forward_batch(batch.features.view())?;
    let table = category_matrix(batch.category_table);
    let g_cache = state.category_encoder.forward_batch(table.view())?;

    let ma = ma_loss(
        f_cache.output.view(),
        &batch.category_index,
        g_cache.output.view(),
        cfg.sigma,
        cfg.gamma,
    )?;

    let mut grad_g = ma.grad_g;
    let mut grad_w = vec![0.0; state.hamming_weights.len()];
    let mut reg = 0.0;
    let active = cfg.regularizer && batch.category_table.len() >= 2;
    if cfg.regularizer && cfg.lambda > 0.0 && !active {
        return Err(Error::Data(
            "regularizer needs at least 2 categories in the table".into(),
        ));
    }
    if active {
        let out = asmr(
            g_cache.output.view(),
            batch.category_table,
            &state.hamming_weights,
            cfg.variant,
        )?;
        reg = out.value;
        if cfg.lambda != 0.0 {
            grad_g.scaled_add(cfg.lambda, &out.grad_g);
            for (g, r) in grad_w.iter_mut().zip(&out.grad_w) {
                *g = cfg.lambda * r;
            }
        }
    }
    let total = ma.value + cfg.lambda * reg;
    if !total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }

    let image = state
        .image_encoder
        .backward_batch(&f_cache, ma.grad_f.view())?;
    let category = state
        .category_encoder
        .backward_batch(&g_cache, grad_g.view())?;
    Ok(TotalLoss {
        total,
        ma: ma.value,
        asmr: reg,
        grads: ModelGradient {
            image,
            category,
            w: grad_w,
        },
    })
}

/// Loss value only, for finite-difference probes.
pub fn total_loss_value(state: &ModelState, batch: &Batch<'_>, cfg: &LossConfig) -> Result<f64> {
    Ok(total_loss(state, batch, cfg)?.total)
}

/// Embeds `features` rows with the image encoder.
pub fn embed_rows(state: &ModelState, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    Ok(state.image_encoder.forward_batch(features)?.output)
}
