//! Dense layers, ReLU MLPs with hand-derived backprop, ℓ2-normalized
//! encoders, and a central-difference gradient checker.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Fully connected layer computing `x·Wᵀ + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerRecord", into = "LayerRecord")]
pub struct DenseLayer {
    /// `out_dim × in_dim`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// On-disk form of a layer: row-major weights plus shape.
#[derive(Serialize, Deserialize)]
struct LayerRecord {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl From<DenseLayer> for LayerRecord {
    fn from(layer: DenseLayer) -> Self {
        LayerRecord {
            in_dim: layer.in_dim(),
            out_dim: layer.out_dim(),
            weight: layer.weight.iter().copied().collect(),
            bias: layer.bias.to_vec(),
        }
    }
}

impl TryFrom<LayerRecord> for DenseLayer {
    type Error = Error;

    fn try_from(rec: LayerRecord) -> Result<Self> {
        check_dim("layer bias", rec.out_dim, rec.bias.len())?;
        let weight = Array2::from_shape_vec((rec.out_dim, rec.in_dim), rec.weight)
            .map_err(|e| Error::Data(format!("layer weight shape: {e}")))?;
        let layer = DenseLayer {
            weight,
            bias: Array1::from(rec.bias),
        };
        if !layer.is_finite() {
            return Err(Error::NonFinite("layer parameters".into()));
        }
        Ok(layer)
    }
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot bound");
        let weight = Array2::from_shape_simple_fn((out_dim, in_dim), || dist.sample(rng));
        Self {
            weight,
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim(), self.out_dim())
    }
}

/// Named, flat view of one parameter block.
pub struct ParamBlock<'a> {
    pub name: String,
    pub values: &'a [f64],
}

pub struct ParamBlockMut<'a> {
    pub name: String,
    pub values: &'a mut [f64],
}

/// Anything whose parameters can be enumerated as flat named blocks.
///
/// Gradients use the same trait so that a gradient and the state it
/// differentiates can be walked in lockstep.
pub trait ParamSet {
    fn blocks(&self) -> Vec<ParamBlock<'_>>;
    fn blocks_mut(&mut self) -> Vec<ParamBlockMut<'_>>;

    fn n_params(&self) -> usize {
        self.blocks().iter().map(|b| b.values.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.values.iter().all(|v| v.is_finite()))
    }
}

impl ParamSet for Vec<f64> {
    fn blocks(&self) -> Vec<ParamBlock<'_>> {
        vec![ParamBlock {
            name: "theta".into(),
            values: self,
        }]
    }

    fn blocks_mut(&mut self) -> Vec<ParamBlockMut<'_>> {
        vec![ParamBlockMut {
            name: "theta".into(),
            values: self,
        }]
    }
}

fn layer_blocks<'a>(prefix: &str, layers: &'a [DenseLayer]) -> Vec<ParamBlock<'a>> {
    let mut out = Vec::with_capacity(layers.len() * 2);
    for (i, layer) in layers.iter().enumerate() {
        out.push(ParamBlock {
            name: format!("{prefix}fc{}.weight", i + 1),
            values: layer.weight.as_slice().expect("standard layout"),
        });
        out.push(ParamBlock {
            name: format!("{prefix}fc{}.bias", i + 1),
            values: layer.bias.as_slice().expect("standard layout"),
        });
    }
    out
}

fn layer_blocks_mut<'a>(prefix: &str, layers: &'a mut [DenseLayer]) -> Vec<ParamBlockMut<'a>> {
    let mut out = Vec::with_capacity(layers.len() * 2);
    for (i, layer) in layers.iter_mut().enumerate() {
        out.push(ParamBlockMut {
            name: format!("{prefix}fc{}.weight", i + 1),
            values: layer.weight.as_slice_mut().expect("standard layout"),
        });
        out.push(ParamBlockMut {
            name: format!("{prefix}fc{}.bias", i + 1),
            values: layer.bias.as_slice_mut().expect("standard layout"),
        });
    }
    out
}

/// Prefixes every block name; used to nest parameter sets.
pub(crate) fn prefixed<'a>(prefix: &str, blocks: Vec<ParamBlock<'a>>) -> Vec<ParamBlock<'a>> {
    blocks
        .into_iter()
        .map(|b| ParamBlock {
            name: format!("{prefix}{}", b.name),
            values: b.values,
        })
        .collect()
}

pub(crate) fn prefixed_mut<'a>(
    prefix: &str,
    blocks: Vec<ParamBlockMut<'a>>,
) -> Vec<ParamBlockMut<'a>> {
    blocks
        .into_iter()
        .map(|b| ParamBlockMut {
            name: format!("{prefix}{}", b.name),
            values: b.values,
        })
        .collect()
}

/// Stack of dense layers with ReLU between them and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<DenseLayer>", into = "Vec<DenseLayer>")]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl TryFrom<Vec<DenseLayer>> for Mlp {
    type Error = Error;

    fn try_from(layers: Vec<DenseLayer>) -> Result<Self> {
        Mlp::new(layers)
    }
}

impl From<Mlp> for Vec<DenseLayer> {
    fn from(mlp: Mlp) -> Self {
        mlp.layers
    }
}

/// Activations recorded by a batched forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer (the previous layer's ReLU output, or `x`).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer; the last one is the network output.
    preacts: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.preacts.last().expect("at least one layer")
    }

    /// Smallest |pre-activation| feeding a ReLU; small values mean a
    /// finite-difference probe may straddle a kink.
    pub fn min_relu_margin(&self) -> f64 {
        let n = self.preacts.len();
        self.preacts[..n - 1]
            .iter()
            .flat_map(|a| a.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            check_dim("layer chain", pair[0].out_dim(), pair[1].in_dim())?;
        }
        Ok(Self { layers })
    }

    /// Glorot-initialized network with layer widths `dims[0] → … → dims[n]`.
    pub fn glorot<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("network needs input and output widths".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Self::new(
            dims.windows(2)
                .map(|w| DenseLayer::glorot(w[0], w[1], rng))
                .collect(),
        )
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(DenseLayer::zeros_like).collect(),
        }
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<MlpCache> {
        check_dim("network input", self.in_dim(), x.ncols())?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut preacts = Vec::with_capacity(n);
        let mut current = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = current.dot(&layer.weight.t()) + &layer.bias;
            inputs.push(current);
            current = if i + 1 < n {
                pre.mapv(|v| v.max(0.0))
            } else {
                pre.clone()
            };
            preacts.push(pre);
        }
        Ok(MlpCache { inputs, preacts })
    }

    /// Gradients of `Σ_rows ⟨upstream, output⟩` with respect to the
    /// parameters (returned in an `Mlp`-shaped container) and the input.
    pub fn backward_batch(
        &self,
        cache: &MlpCache,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<(Mlp, Array2<f64>)> {
        let out = cache.output();
        if upstream.dim() != out.dim() {
            return Err(Error::Dimension {
                context: "network upstream gradient",
                expected: out.ncols(),
                got: upstream.ncols(),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let weight = delta.t().dot(&cache.inputs[i]);
            let bias = delta.sum_axis(Axis(0));
            grads.push(DenseLayer { weight, bias });
            let mut d_input = delta.dot(&layer.weight);
            if i > 0 {
                ndarray::Zip::from(&mut d_input)
                    .and(&cache.preacts[i - 1])
                    .for_each(|d, &p| {
                        if p <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            delta = d_input;
        }
        grads.reverse();
        Ok((Mlp { layers: grads }, delta))
    }

    /// Element-wise `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Mlp, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
    }
}

impl ParamSet for Mlp {
    fn blocks(&self) -> Vec<ParamBlock<'_>> {
        layer_blocks("", &self.layers)
    }

    fn blocks_mut(&mut self) -> Vec<ParamBlockMut<'_>> {
        layer_blocks_mut("", &mut self.layers)
    }
}

/// Unit-ℓ2-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// MLP followed by ℓ2 normalization of its output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EncoderNet {
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    pub mlp: MlpCache,
    /// Normalized outputs, one row per input.
    pub output: Array2<f64>,
    /// Pre-normalization norms.
    pub norms: Array1<f64>,
}

impl EncoderNet {
    pub fn new(mlp: Mlp) -> Self {
        Self { mlp }
    }

    pub fn glorot<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        Ok(Self::new(Mlp::glorot(dims, rng)?))
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn in_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Embedding> {
        let row = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::Data(format!("input shape: {e}")))?;
        let cache = self.forward_batch(row)?;
        Ok(Embedding(cache.output.row(0).to_vec()))
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<EncoderCache> {
        let mlp = self.mlp.forward_batch(x)?;
        let raw = mlp.output();
        let mut output = raw.clone();
        let mut norms = Array1::zeros(raw.nrows());
        for (i, mut row) in output.rows_mut().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 {
                return Err(Error::Degenerate(format!(
                    "encoder output {i} is the zero vector before normalization"
                )));
            }
            if !norm.is_finite() {
                return Err(Error::NonFinite("encoder output".into()));
            }
            row /= norm;
            norms[i] = norm;
        }
        Ok(EncoderCache { mlp, output, norms })
    }

    /// Parameter gradients of `Σ_rows ⟨upstream, normalized output⟩`.
    pub fn backward_batch(
        &self,
        cache: &EncoderCache,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<Mlp> {
        if upstream.dim() != cache.output.dim() {
            return Err(Error::Dimension {
                context: "encoder upstream gradient",
                expected: cache.output.ncols(),
                got: upstream.ncols(),
            });
        }
        // d(z/|z|) = (I/|z| - z zᵀ/|z|³) dz, written via y = z/|z|.
        let mut d_raw = upstream.to_owned();
        for ((mut d, y), &norm) in d_raw
            .rows_mut()
            .into_iter()
            .zip(cache.output.rows())
            .zip(cache.norms.iter())
        {
            let proj = d.dot(&y);
            d.scaled_add(-proj, &y);
            d /= norm;
        }
        Ok(self.mlp.backward_batch(&cache.mlp, d_raw.view())?.0)
    }

    /// Single-input form of [`EncoderNet::backward_batch`].
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Mlp> {
        let row = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::Data(format!("input shape: {e}")))?;
        let cache = self.forward_batch(row)?;
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).map_err(|_| {
            Error::Dimension {
                context: "encoder upstream gradient",
                expected: self.out_dim(),
                got: upstream.len(),
            }
        })?;
        self.backward_batch(&cache, up)
    }
}

impl ParamSet for EncoderNet {
    fn blocks(&self) -> Vec<ParamBlock<'_>> {
        self.mlp.blocks()
    }

    fn blocks_mut(&mut self) -> Vec<ParamBlockMut<'_>> {
        self.mlp.blocks_mut()
    }
}

/// Denominator floor of the relative error, so that near-zero gradients
/// are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub len: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Compares `analytic` against central differences of `f` around `state`,
/// one parameter at a time.
pub fn grad_check<S, G, F>(
    mut f: F,
    state: &S,
    analytic: &G,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    S: ParamSet + Clone,
    G: ParamSet,
    F: FnMut(&S) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("finite-difference step {step} must be > 0")));
    }
    let shapes: Vec<(String, usize)> = state
        .blocks()
        .iter()
        .map(|b| (b.name.clone(), b.values.len()))
        .collect();
    let grads = analytic.blocks();
    if grads.len() != shapes.len() {
        return Err(Error::Dimension {
            context: "gradient block count",
            expected: shapes.len(),
            got: grads.len(),
        });
    }
    for ((name, len), g) in shapes.iter().zip(&grads) {
        if g.values.len() != *len {
            return Err(Error::Dimension {
                context: "gradient block length",
                expected: *len,
                got: g.values.len(),
            });
        }
        if *name != g.name {
            return Err(Error::Config(format!(
                "gradient block '{}' does not match parameter block '{name}'",
                g.name
            )));
        }
    }

    let mut work = state.clone();
    let mut blocks = Vec::with_capacity(shapes.len());
    for (b, (name, len)) in shapes.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for i in 0..*len {
            let orig = work.blocks_mut()[b].values[i];
            work.blocks_mut()[b].values[i] = orig + step;
            let plus = f(&work)?;
            work.blocks_mut()[b].values[i] = orig - step;
            let minus = f(&work)?;
            work.blocks_mut()[b].values[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective at perturbed {name}[{i}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = grads[b].values[i];
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric));
        }
        blocks.push(BlockReport {
            name: name.clone(),
            len: *len,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    let passed = blocks.iter().all(|b| b.max_rel_error <= tolerance);
    Ok(GradCheckReport {
        step,
        tolerance,
        blocks,
        passed,
    })
}
