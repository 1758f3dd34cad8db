//! Per-group attribute classifiers used to pretrain the feature encoder.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::diffnet::{prefixed, prefixed_mut, Mlp, ParamBlock, ParamBlockMut, ParamSet};
use crate::error::{Error, Result};

/// Hidden widths of every classification head (four dense layers in total).
pub const HEAD_HIDDEN: [usize; 3] = [512, 256, 128];

/// One classifier MLP per attribute group.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainHeads {
    heads: Vec<Mlp>,
}

impl PretrainHeads {
    pub fn new(heads: Vec<Mlp>) -> Self {
        Self { heads }
    }

    /// Heads `in_dim → hidden… → group_size` for every group.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        hidden: &[usize],
        group_sizes: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let heads = group_sizes
            .iter()
            .map(|&c| {
                let mut dims = Vec::with_capacity(hidden.len() + 2);
                dims.push(in_dim);
                dims.extend_from_slice(hidden);
                dims.push(c);
                Mlp::glorot(&dims, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { heads })
    }

    pub fn heads(&self) -> &[Mlp] {
        &self.heads
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            heads: self.heads.iter().map(Mlp::zeros_like).collect(),
        }
    }
}

impl ParamSet for PretrainHeads {
    fn blocks(&self) -> Vec<ParamBlock<'_>> {
        self.heads
            .iter()
            .enumerate()
            .flat_map(|(g, h)| prefixed(&format!("head{g}."), h.blocks()))
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<ParamBlockMut<'_>> {
        self.heads
            .iter_mut()
            .enumerate()
            .flat_map(|(g, h)| prefixed_mut(&format!("head{g}."), h.blocks_mut()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ClassificationOutput {
    pub value: f64,
    /// Gradient with respect to the trunk output rows.
    pub grad_trunk: Array2<f64>,
    pub grad_heads: PretrainHeads,
    /// Correct predictions per group.
    pub correct: Vec<usize>,
}

/// Sum over groups of the mean softmax cross-entropy of each head.
///
/// `labels[i][j]` is the ground-truth attribute index of row `i` in group `j`.
pub fn cls_pretrain_loss(
    trunk_output: ArrayView2<'_, f64>,
    heads: &PretrainHeads,
    labels: &[Vec<usize>],
) -> Result<ClassificationOutput> {
    let m = trunk_output.nrows();
    if labels.len() != m {
        return Err(Error::Dimension {
            context: "label rows",
            expected: m,
            got: labels.len(),
        });
    }
    if m == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let n_groups = heads.len();
    let mut grad_trunk = Array2::<f64>::zeros(trunk_output.raw_dim());
    let mut grad_heads = Vec::with_capacity(n_groups);
    let mut correct = vec![0; n_groups];
    let mut value = 0.0;
    for row in labels {
        if row.len() != n_groups {
            return Err(Error::Dimension {
                context: "heads vs groups",
                expected: n_groups,
                got: row.len(),
            });
        }
    }
    for (j, head) in heads.heads.iter().enumerate() {
        let cache = head.forward_batch(trunk_output)?;
        let logits = cache.output();
        let c = logits.ncols();
        let mut d_logits = Array2::<f64>::zeros(logits.raw_dim());
        let mut group_loss = 0.0;
        for i in 0..m {
            let y = labels[i][j];
            if y >= c {
                return Err(Error::Data(format!(
                    "label {y} out of range for group {j} with {c} attributes"
                )));
            }
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            group_loss += lse - row[y];
            let argmax = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| {
                    if v > best.1 {
                        (k, v)
                    } else {
                        best
                    }
                })
                .0;
            if argmax == y {
                correct[j] += 1;
            }
            for k in 0..c {
                let p = (row[k] - lse).exp();
                d_logits[[i, k]] = (p - if k == y { 1.0 } else { 0.0 }) / m as f64;
            }
        }
        value += group_loss / m as f64;
        let (g, d_in) = head.backward_batch(&cache, d_logits.view())?;
        grad_trunk += &d_in;
        grad_heads.push(g);
    }
    if !value.is_finite() {
        return Err(Error::NonFinite("classification loss".into()));
    }
    Ok(ClassificationOutput {
        value,
        grad_trunk,
        grad_heads: PretrainHeads::new(grad_heads),
        correct,
    })
}
