//! Trainable state of both encoders plus the Hamming weights, and the
//! on-disk checkpoint format.
//!
//! A checkpoint is one JSON document:
//!
//! ```text
//! {
//!   "format": "asmr-checkpoint",
//!   "version": 1,
//!   "seed": <u64>,
//!   "epochs_completed": <usize>,
//!   "model": {
//!     "image_encoder":    [ {"in_dim", "out_dim", "weight": [row-major], "bias"}, ... ],
//!     "category_encoder": [ ... ],
//!     "hamming_weights":  [ ... ]
//!   },
//!   "optimizer": null | { "epoch", "velocity": {"image", "category", "w"} }
//! }
//! ```
//!
//! Floats are written with shortest round-trip formatting, so saving and
//! reloading is lossless and identical states give identical bytes.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{prefixed, prefixed_mut, EncoderNet, Mlp, ParamBlock, ParamBlockMut, ParamSet};
use crate::error::{check_dim, Error, Result};
use crate::objective::{category_matrix, HammingWeights, PretrainHeads};
use crate::schema::{AttributeSchema, PersonCategory};
use crate::trainer::OptimizerState;

pub const CHECKPOINT_FORMAT: &str = "asmr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Layer widths of the two encoders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    /// Width of the precomputed image feature vectors.
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            feature_dim: 2048,
            hidden: vec![512, 128],
            embed_dim: 128,
        }
    }
}

impl ModelShape {
    fn dims(&self, input: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.embed_dim);
        dims
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub image_encoder: EncoderNet,
    pub category_encoder: EncoderNet,
    pub hamming_weights: HammingWeights,
    /// Present only while pretraining.
    #[serde(skip)]
    pub pretrain_heads: Option<PretrainHeads>,
}

impl ModelState {
    /// Fresh state: Glorot-uniform weights, zero biases, uniform Hamming
    /// weights. The two encoders draw from separate streams of `seed`.
    pub fn init(shape: &ModelShape, schema: &AttributeSchema, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let image_encoder = EncoderNet::glorot(&shape.dims(shape.feature_dim), &mut rng)?;
        rng.set_stream(2);
        rng.set_word_pos(0);
        let category_encoder = EncoderNet::glorot(&shape.dims(schema.dim()), &mut rng)?;
        let state = Self {
            image_encoder,
            category_encoder,
            hamming_weights: HammingWeights::uniform(schema.dim(), schema.n_groups()),
            pretrain_heads: None,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(
            "joint embedding width",
            self.category_encoder.out_dim(),
            self.image_encoder.out_dim(),
        )?;
        check_dim(
            "hamming weights vs category input",
            self.category_encoder.in_dim(),
            self.hamming_weights.len(),
        )?;
        if !self.all_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.image_encoder.out_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.image_encoder.in_dim()
    }

    pub fn embed_features(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.image_encoder.forward_batch(x)?.output)
    }

    pub fn embed_categories(&self, categories: &[PersonCategory]) -> Result<Array2<f64>> {
        let table = category_matrix(categories);
        Ok(self.category_encoder.forward_batch(table.view())?.output)
    }

    pub fn zero_gradient(&self) -> ModelGradient {
        ModelGradient {
            image: self.image_encoder.mlp().zeros_like(),
            category: self.category_encoder.mlp().zeros_like(),
            w: vec![0.0; self.hamming_weights.len()],
        }
    }
}

impl ParamSet for ModelState {
    fn blocks(&self) -> Vec<ParamBlock<'_>> {
        let mut out = prefixed("image.", self.image_encoder.blocks());
        out.extend(prefixed("category.", self.category_encoder.blocks()));
        out.push(ParamBlock {
            name: "w".into(),
            values: self.hamming_weights.as_slice(),
        });
        out
    }

    fn blocks_mut(&mut self) -> Vec<ParamBlockMut<'_>> {
        let mut out = prefixed_mut("image.", self.image_encoder.blocks_mut());
        out.extend(prefixed_mut("category.", self.category_encoder.blocks_mut()));
        out.push(ParamBlockMut {
            name: "w".into(),
            values: self.hamming_weights.as_mut_slice(),
        });
        out
    }
}

/// Gradient (or velocity) laid out like [`ModelState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGradient {
    pub image: Mlp,
    pub category: Mlp,
    pub w: Vec<f64>,
}

impl ParamSet for ModelGradient {
    fn blocks(&self) -> Vec<ParamBlock<'_>> {
        let mut out = prefixed("image.", self.image.blocks());
        out.extend(prefixed("category.", self.category.blocks()));
        out.push(ParamBlock {
            name: "w".into(),
            values: &self.w,
        });
        out
    }

    fn blocks_mut(&mut self) -> Vec<ParamBlockMut<'_>> {
        let mut out = prefixed_mut("image.", self.image.blocks_mut());
        out.extend(prefixed_mut("category.", self.category.blocks_mut()));
        out.push(ParamBlockMut {
            name: "w".into(),
            values: &mut self.w,
        });
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub epochs_completed: usize,
    pub model: ModelState,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(
        model: ModelState,
        seed: u64,
        epochs_completed: usize,
        optimizer: Option<OptimizerState>,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed,
            epochs_completed,
            model,
            optimizer,
        }
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string(self).expect("checkpoint serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!("not a checkpoint (format '{}')", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        ckpt.model.validate()?;
        if let Some(opt) = &ckpt.optimizer {
            let layout = |s: &dyn ParamSet| -> Vec<(String, usize)> {
                s.blocks()
                    .iter()
                    .map(|b| (b.name.clone(), b.values.len()))
                    .collect()
            };
            if layout(&ckpt.model) != layout(&opt.velocity) {
                return Err(Error::Data(
                    "optimizer state does not match model shape".into(),
                ));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(inner) => Error::Parse {
                path: path.to_path_buf(),
                line: inner.line(),
                message: inner.to_string(),
            },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_shape() -> ModelShape {
        ModelShape {
            feature_dim: 6,
            hidden: vec![8, 5],
            embed_dim: 4,
        }
    }

    #[test]
    fn init_is_seeded_and_consistent() {
        let schema = AttributeSchema::from_group_sizes(&[2, 3]).unwrap();
        let a = ModelState::init(&small_shape(), &schema, 7).unwrap();
        let b = ModelState::init(&small_shape(), &schema, 7).unwrap();
        let c = ModelState::init(&small_shape(), &schema, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.embed_dim(), 4);
        assert_eq!(a.hamming_weights.as_slice(), &[0.25; 5]);
        assert_eq!(a.image_encoder.mlp().layers().len(), 3);
    }

    #[test]
    fn category_init_ignores_feature_width() {
        let schema = AttributeSchema::from_group_sizes(&[2, 3]).unwrap();
        let a = ModelState::init(&small_shape(), &schema, 7).unwrap();
        let mut wide = small_shape();
        wide.feature_dim = 30;
        let b = ModelState::init(&wide, &schema, 7).unwrap();
        assert_eq!(a.category_encoder, b.category_encoder);
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let schema = AttributeSchema::from_group_sizes(&[2, 3]).unwrap();
        let state = ModelState::init(&small_shape(), &schema, 3).unwrap();
        let ckpt = Checkpoint::new(state, 3, 0, None);
        let text = ckpt.to_json();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn checkpoint_rejects_foreign_documents() {
        let schema = AttributeSchema::from_group_sizes(&[2, 3]).unwrap();
        let state = ModelState::init(&small_shape(), &schema, 3).unwrap();
        let mut ckpt = Checkpoint::new(state, 3, 0, None);
        ckpt.format = "other".into();
        assert!(Checkpoint::from_json(&ckpt.to_json()).is_err());
        ckpt.format = CHECKPOINT_FORMAT.into();
        ckpt.version = 9;
        assert!(Checkpoint::from_json(&ckpt.to_json()).is_err());
    }
}
