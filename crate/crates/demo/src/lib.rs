//! Browser demo: the δ similarity matrix, the angular-margin loss curve,
//! and a small training run, exposed through wasm-bindgen.
//!
//! The `compute` functions are plain Rust so they can be tested natively;
//! the exported wrappers only convert errors.

use asmr_core::data::{generate, split, Saliency, SynthConfig};
use asmr_core::experiment::shape_for;
use asmr_core::objective::{delta, ma_loss, HammingWeights};
use asmr_core::retrieval::{evaluate, semantic_alignment_diagnostic};
use asmr_core::trainer::train;
use asmr_core::{AttributeSchema, LossConfig, ModelShape, ModelState, PersonCategory, TrainConfig};
use ndarray::Array2;
use wasm_bindgen::prelude::*;

/// Schemas larger than this are refused by the δ matrix view.
pub const MAX_CATEGORIES: usize = 64;

pub mod compute {
    use super::*;

    /// Every category of a schema, in index order.
    pub fn all_categories(schema: &AttributeSchema) -> Vec<PersonCategory> {
        let sizes = schema.group_sizes();
        let total: usize = sizes.iter().product();
        (0..total)
            .map(|mut i| {
                let mut idx = vec![0; sizes.len()];
                for g in (0..sizes.len()).rev() {
                    idx[g] = i % sizes[g];
                    i /= sizes[g];
                }
                schema.category_from_indices(&idx).expect("index in range")
            })
            .collect()
    }

    /// Row-major δ over all category pairs. `weights` holds one value per
    /// group, applied to each of that group's bits.
    pub fn delta_matrix(group_sizes: &[usize], weights: &[f64]) -> Result<(Vec<String>, Vec<f64>), String> {
        let schema = AttributeSchema::from_group_sizes(group_sizes).map_err(|e| e.to_string())?;
        if weights.len() != group_sizes.len() {
            return Err(format!("need {} weights, got {}", group_sizes.len(), weights.len()));
        }
        let cats = all_categories(&schema);
        if cats.len() > MAX_CATEGORIES {
            return Err(format!("{} categories; at most {MAX_CATEGORIES} are shown", cats.len()));
        }
        let per_bit: Vec<f64> = group_sizes
            .iter()
            .zip(weights)
            .flat_map(|(&n, &w)| std::iter::repeat_n(w, n))
            .collect();
        let w = HammingWeights::new(per_bit).map_err(|e| e.to_string())?;
        let mut out = Vec::with_capacity(cats.len() * cats.len());
        for p in &cats {
            for q in &cats {
                out.push(delta(p, q, &w).map_err(|e| e.to_string())?);
            }
        }
        let labels = cats
            .iter()
            .map(|c| {
                schema
                    .indices_of(c.bits())
                    .expect("valid category")
                    .iter()
                    .map(|i| i.to_string())
                    .collect::<String>()
            })
            .collect();
        Ok((labels, out))
    }

    /// Loss of one image whose embedding sits at angle θ from its own
    /// prototype, with a second prototype at `other_angle`, for θ sampled
    /// evenly over [0, π].
    pub fn ma_loss_profile(sigma: f64, gamma: f64, other_angle: f64, points: usize) -> Result<Vec<f64>, String> {
        if points < 2 {
            return Err("need at least 2 points".into());
        }
        let g = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, other_angle.cos(), other_angle.sin()])
            .map_err(|e| e.to_string())?;
        (0..points)
            .map(|i| {
                let theta = std::f64::consts::PI * i as f64 / (points - 1) as f64;
                let f = Array2::from_shape_vec((1, 2), vec![theta.cos(), -theta.sin()]).expect("shape");
                ma_loss(f.view(), &[0], g.view(), sigma, gamma)
                    .map(|o| o.value)
                    .map_err(|e| e.to_string())
            })
            .collect()
    }

    #[derive(Debug, Clone, PartialEq)]
    pub struct ToyRun {
        pub losses: Vec<f64>,
        pub weights: Vec<f64>,
        pub similarities: Vec<f64>,
        pub deltas: Vec<f64>,
        pub spearman: f64,
        pub unseen_rank1: f64,
    }

    /// Trains a small model on a (2, 3, 2) toy benchmark and reports the
    /// loss curve, learned weights and the similarity/δ scatter.
    pub fn train_toy(epochs: usize, lambda: f64, noise: f64, seed: u64) -> Result<ToyRun, String> {
        let err = |e: asmr_core::Error| e.to_string();
        let synth = SynthConfig {
            group_sizes: vec![2, 3, 2],
            n_categories: 12,
            feature_dim: 16,
            noise_std: noise,
            saliency: Saliency::Uniform(1.0),
            images_per_category: asmr_core::data::ImagesPerCategory::Fixed(12),
            unseen_fraction: 0.25,
            ..SynthConfig::standard(seed)
        };
        let raw = generate(&synth).map_err(err)?;
        let data = split(&raw, synth.unseen_fraction, synth.seen_test_fraction, seed).map_err(err)?;
        let shape = ModelShape {
            feature_dim: 0,
            hidden: vec![32, 16],
            embed_dim: 16,
        };
        let mut state = ModelState::init(&shape_for(&shape, &data), &data.schema, seed).map_err(err)?;
        let loss = LossConfig {
            lambda,
            sigma: 16.0,
            ..LossConfig::default()
        };
        let cfg = TrainConfig {
            epochs,
            batch_size: 32,
            lr_image: 1e-2,
            decay_every: epochs.max(1),
            pretrain_epochs: 0,
            seed,
            ..TrainConfig::default()
        };
        let (_, metrics) = train(&mut state, &data, &loss, &cfg, None, |_, _, _| Ok(())).map_err(err)?;
        let diag = semantic_alignment_diagnostic(&state, &data.all_categories()).map_err(err)?;
        let report = evaluate(&state, &data, &[1]).map_err(err)?;
        Ok(ToyRun {
            losses: metrics.iter().map(|m| m.loss_total).collect(),
            weights: state.hamming_weights.as_slice().to_vec(),
            similarities: diag.pairs.iter().map(|p| p.s).collect(),
            deltas: diag.pairs.iter().map(|p| p.delta).collect(),
            spearman: diag.spearman_rho.unwrap_or(f64::NAN),
            unseen_rank1: report
                .split("unseen")
                .and_then(|m| m.rank(1))
                .unwrap_or(f64::NAN),
        })
    }
}

#[wasm_bindgen]
pub struct DeltaMatrix {
    labels: Vec<String>,
    values: Vec<f64>,
}

#[wasm_bindgen]
impl DeltaMatrix {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn labels(&self) -> Vec<String> {
        self.labels.clone()
    }
}

#[wasm_bindgen]
pub fn delta_matrix(group_sizes: Vec<u32>, group_weights: Vec<f64>) -> Result<DeltaMatrix, JsError> {
    let sizes: Vec<usize> = group_sizes.iter().map(|&s| s as usize).collect();
    let (labels, values) = compute::delta_matrix(&sizes, &group_weights).map_err(|e| JsError::new(&e))?;
    Ok(DeltaMatrix { labels, values })
}

#[wasm_bindgen]
pub fn ma_loss_profile(sigma: f64, gamma: f64, other_angle: f64, points: usize) -> Result<Vec<f64>, JsError> {
    compute::ma_loss_profile(sigma, gamma, other_angle, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub struct ToyRun(compute::ToyRun);

#[wasm_bindgen]
impl ToyRun {
    pub fn losses(&self) -> Vec<f64> {
        self.0.losses.clone()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.0.weights.clone()
    }

    pub fn similarities(&self) -> Vec<f64> {
        self.0.similarities.clone()
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.0.deltas.clone()
    }

    pub fn spearman(&self) -> f64 {
        self.0.spearman
    }

    pub fn unseen_rank1(&self) -> f64 {
        self.0.unseen_rank1
    }
}

#[wasm_bindgen]
pub fn train_toy(epochs: usize, lambda: f64, noise: f64, seed: u64) -> Result<ToyRun, JsError> {
    compute::train_toy(epochs, lambda, noise, seed)
        .map(ToyRun)
        .map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::compute::*;

    #[test]
    fn delta_matrix_is_symmetric_with_constant_diagonal() {
        let (labels, m) = delta_matrix(&[2, 3], &[0.25, 0.25]).unwrap();
        let n = labels.len();
        assert_eq!(n, 6);
        assert_eq!(labels[0], "00");
        assert_eq!(labels[5], "12");
        for i in 0..n {
            assert!((m[i * n + i] - 0.7310585786300049).abs() < 1e-15);
            for j in 0..n {
                assert_eq!(m[i * n + j], m[j * n + i]);
            }
        }
        assert!(delta_matrix(&[2, 3], &[0.25]).is_err());
        assert!(delta_matrix(&[4, 4, 5], &[0.1; 3]).is_err());
    }

    #[test]
    fn loss_profile_rises_with_angle() {
        let p = ma_loss_profile(8.0, 0.2, std::f64::consts::FRAC_PI_2, 50).unwrap();
        assert_eq!(p.len(), 50);
        assert!(p[0] < p[25] && p[25] < p[49]);
        let no_margin = ma_loss_profile(8.0, 0.0, std::f64::consts::FRAC_PI_2, 50).unwrap();
        assert!(no_margin[0] < p[0]);
    }

    #[test]
    fn toy_training_runs() {
        let run = train_toy(5, 4.0, 0.3, 1).unwrap();
        assert_eq!(run.losses.len(), 5);
        assert!(run.losses[4] < run.losses[0]);
        assert_eq!(run.weights.len(), 7);
        assert_eq!(run.similarities.len(), 12 * 11 / 2);
        assert_eq!(run.deltas.len(), run.similarities.len());
        assert!(run.spearman.is_finite());
    }
}
