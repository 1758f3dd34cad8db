//! Seeded toy instances of the full objective and a finite-difference
//! check of its analytic gradient on each of them.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::diffnet::{grad_check, GradCheckReport, ParamSet};
use crate::error::{Error, Result};
use crate::model::{ModelShape, ModelState};
use crate::objective::{category_matrix, total_loss, Batch, LossConfig, Variant};
use crate::schema::{AttributeSchema, PersonCategory};

/// Instances closer than this to a ReLU kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-6;
/// Instances with an image/prototype cosine beyond this are redrawn, to
/// stay clear of the arccos clamp.
pub const MAX_ABS_COSINE: f64 = 0.999;

#[derive(Debug, Clone)]
pub struct ToyInstance {
    pub state: ModelState,
    pub features: Array2<f64>,
    pub category_index: Vec<usize>,
    pub categories: Vec<PersonCategory>,
}

impl ToyInstance {
    pub fn batch(&self) -> Batch<'_> {
        Batch {
            features: self.features.clone(),
            category_index: self.category_index.clone(),
            category_table: &self.categories,
        }
    }

    fn is_well_posed(&self) -> Result<bool> {
        let table = category_matrix(&self.categories);
        let (f, g) = match (
            self.state.image_encoder.forward_batch(self.features.view()),
            self.state.category_encoder.forward_batch(table.view()),
        ) {
            (Ok(f), Ok(g)) => (f, g),
            (Err(Error::Degenerate(_)), _) | (_, Err(Error::Degenerate(_))) => return Ok(false),
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        let margin = f.mlp.min_relu_margin().min(g.mlp.min_relu_margin());
        let cos = f.output.dot(&g.output.t());
        Ok(margin >= KINK_MARGIN && cos.iter().all(|c| c.abs() <= MAX_ABS_COSINE))
    }
}

/// A 4-image, 3-category instance on a (2, 3, 2) schema with random
/// Hamming weights. Deterministic in `seed`.
pub fn toy_instance(seed: u64) -> Result<ToyInstance> {
    let schema = AttributeSchema::from_group_sizes(&[2, 3, 2])?;
    let shape = ModelShape {
        feature_dim: 5,
        hidden: vec![6, 5],
        embed_dim: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    loop {
        let mut state = ModelState::init(&shape, &schema, rng.random())?;
        for w in state.hamming_weights.as_mut_slice() {
            *w = rng.random_range(0.05..0.5);
        }
        let mut combos: Vec<[usize; 3]> = (0..12).map(|i| [i / 6, (i / 2) % 3, i % 2]).collect();
        combos.shuffle(&mut rng);
        let categories = combos[..3]
            .iter()
            .map(|c| schema.category_from_indices(c))
            .collect::<Result<Vec<_>>>()?;
        let features = Array2::from_shape_simple_fn((4, shape.feature_dim), || {
            StandardNormal.sample(&mut rng)
        });
        let instance = ToyInstance {
            state,
            features,
            category_index: vec![0, 1, 2, rng.random_range(0..3)],
            categories,
        };
        if instance.is_well_posed()? {
            return Ok(instance);
        }
    }
}

pub fn toy_loss(variant: Variant) -> LossConfig {
    LossConfig {
        sigma: 4.0,
        gamma: 0.1,
        lambda: 4.0,
        variant,
        regularizer: true,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub instances: u64,
    pub first_seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub variants: Vec<Variant>,
    /// Perturbs one analytic gradient entry; the suite must then fail.
    pub corrupt: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            first_seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            variants: Variant::ALL.to_vec(),
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub seed: u64,
    pub variant: Variant,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
    pub passed: bool,
}

impl SuiteReport {
    /// Worst relative error per block name across all cases.
    pub fn block_maxima(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for case in &self.cases {
            for b in &case.report.blocks {
                match out.iter_mut().find(|(n, _)| *n == b.name) {
                    Some((_, v)) => *v = v.max(b.max_rel_error),
                    None => out.push((b.name.clone(), b.max_rel_error)),
                }
            }
        }
        out
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.report.max_rel_error())
            .fold(0.0, f64::max)
    }
}

pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let mut cases = Vec::new();
    for seed in cfg.first_seed..cfg.first_seed + cfg.instances {
        let instance = toy_instance(seed)?;
        let batch = instance.batch();
        for &variant in &cfg.variants {
            let loss = toy_loss(variant);
            let mut grads = total_loss(&instance.state, &batch, &loss)?.grads;
            if cfg.corrupt {
                grads.blocks_mut()[0].values[0] += 1e-2;
            }
            let report = grad_check(
                |s: &ModelState| Ok(total_loss(s, &batch, &loss)?.total),
                &instance.state,
                &grads,
                cfg.step,
                cfg.tolerance,
            )?;
            cases.push(CaseReport {
                seed,
                variant,
                report,
            });
        }
    }
    let passed = cases.iter().all(|c| c.report.passed);
    Ok(SuiteReport { cases, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_instances_are_seeded() {
        let a = toy_instance(3).unwrap();
        let b = toy_instance(3).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.features, b.features);
        assert_eq!(a.categories.len(), 3);
        assert!(toy_instance(4).unwrap().features != a.features);
    }

    #[test]
    fn corrupted_suite_fails() {
        let cfg = SuiteConfig {
            instances: 1,
            corrupt: true,
            ..Default::default()
        };
        assert!(!run_suite(&cfg).unwrap().passed);
    }
}
