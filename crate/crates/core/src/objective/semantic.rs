//! Semantic similarity between categories and the margin regularizer that
//! arranges category prototypes according to it.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::Variant;
use crate::error::{Error, Result};
use crate::schema::{hamming_profile, PersonCategory};

/// Learnable per-bit weights of the weighted Hamming distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HammingWeights(Vec<f64>);

/// Initial value of every weight: `1 / (2·n_groups)`.
///
/// Identical categories then start at `Sigmoid(1)` and categories that
/// differ in every group at `Sigmoid(0)`.
pub fn uniform_weight(n_groups: usize) -> f64 {
    1.0 / (2 * n_groups) as f64
}

impl HammingWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("hamming weights".into()));
        }
        Ok(Self(w))
    }

    pub fn uniform(dim: usize, n_groups: usize) -> Self {
        Self(vec![uniform_weight(n_groups); dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn weighted_distance(profile: &[u8], w: &[f64]) -> f64 {
    profile
        .iter()
        .zip(w)
        .filter(|(&h, _)| h == 1)
        .map(|(_, &wk)| wk)
        .sum()
}

/// `Sigmoid(1 - Σ_k w_k |p(k) - q(k)|)`.
pub fn delta(p: &PersonCategory, q: &PersonCategory, w: &HammingWeights) -> Result<f64> {
    let profile = hamming_profile(p, q)?;
    if profile.len() != w.len() {
        return Err(Error::Dimension {
            context: "hamming weights",
            expected: profile.len(),
            got: w.len(),
        });
    }
    if w.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("hamming weights".into()));
    }
    Ok(sigmoid(1.0 - weighted_distance(&profile, w.as_slice())))
}

/// Sum that does not depend on the order of `values`.
fn order_free_sum(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum()
}

pub(crate) fn normalize_rows(g: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut unit = g.to_owned();
    let mut norms = Array1::zeros(g.nrows());
    for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate(format!("embedding {i} has norm {n}")));
        }
        row /= n;
        norms[i] = n;
    }
    Ok((unit, norms))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarities of all unordered pairs `i < j`, row-major.
fn pair_similarities(unit: &Array2<f64>) -> Vec<f64> {
    let n = unit.nrows();
    let rows: Vec<&[f64]> = unit
        .rows()
        .into_iter()
        .map(|r| r.to_slice().expect("standard layout"))
        .collect();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(dot(rows[i], rows[j]));
        }
    }
    out
}

/// Mean cosine similarity over all unordered pairs.
pub fn mu(g: ArrayView2<'_, f64>) -> Result<f64> {
    if g.nrows() < 2 {
        return Err(Error::Data(format!(
            "mean pairwise similarity needs at least 2 embeddings, got {}",
            g.nrows()
        )));
    }
    let (unit, _) = normalize_rows(g)?;
    let s = pair_similarities(&unit);
    Ok(order_free_sum(&s) / s.len() as f64)
}

struct Residuals {
    value: f64,
    residuals: Vec<f64>,
}

fn regularizer_core(s: &[f64], d: &[f64]) -> Residuals {
    let n = s.len() as f64;
    let mean = order_free_sum(s) / n;
    let residuals: Vec<f64> = s.iter().zip(d).map(|(s, d)| s - mean - d).collect();
    let squares: Vec<f64> = residuals.iter().map(|r| r * r).collect();
    Residuals {
        value: order_free_sum(&squares) / n,
        residuals,
    }
}

/// Mean of `(S_ij - mean(S) - D_ij)²` over pairs.
pub fn asmr_from_similarities(s: &[f64], d: &[f64]) -> Result<f64> {
    if s.len() != d.len() {
        return Err(Error::Dimension {
            context: "similarity/delta pairs",
            expected: s.len(),
            got: d.len(),
        });
    }
    if s.is_empty() {
        return Err(Error::Data("no pairs".into()));
    }
    Ok(regularizer_core(s, d).value)
}

#[derive(Debug, Clone)]
pub struct AsmrOutput {
    pub value: f64,
    pub mu: f64,
    /// Gradient with respect to each input embedding row.
    pub grad_g: Array2<f64>,
    /// Gradient with respect to the Hamming weights (zero for variants
    /// that do not train them).
    pub grad_w: Vec<f64>,
}

/// Regularizer over category embeddings `g` (one row per category).
///
/// `mu` is differentiated through, so the result and its gradient are
/// invariant to a common shift of all pairwise similarities.
pub fn asmr(
    g: ArrayView2<'_, f64>,
    categories: &[PersonCategory],
    w: &HammingWeights,
    variant: Variant,
) -> Result<AsmrOutput> {
    let n = g.nrows();
    if n != categories.len() {
        return Err(Error::Dimension {
            context: "embeddings vs categories",
            expected: categories.len(),
            got: n,
        });
    }
    if n < 2 {
        return Err(Error::Data(format!(
            "regularizer needs at least 2 categories, got {n}"
        )));
    }
    let dim = w.len();
    for c in categories {
        if c.dim() != dim {
            return Err(Error::Dimension {
                context: "category vs hamming weights",
                expected: dim,
                got: c.dim(),
            });
        }
    }
    if w.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("hamming weights".into()));
    }

    // Effective weights inside δ.
    let w_norm = w.l2_norm();
    let effective: Option<Vec<f64>> = match variant {
        Variant::Full => Some(w.0.clone()),
        Variant::UniformW => {
            let n_groups = categories[0].bits().iter().filter(|&&b| b == 1).count();
            Some(vec![uniform_weight(n_groups.max(1)); dim])
        }
        Variant::L2normW => {
            if w_norm == 0.0 {
                return Err(Error::Degenerate("hamming weights have zero norm".into()));
            }
            Some(w.0.iter().map(|v| v / w_norm).collect())
        }
        Variant::NoDelta => None,
    };

    let (unit, norms) = normalize_rows(g)?;
    let s = pair_similarities(&unit);
    let n_pairs = s.len();

    let mut profiles = Vec::with_capacity(n_pairs);
    let mut d = Vec::with_capacity(n_pairs);
    for i in 0..n {
        for j in i + 1..n {
            match &effective {
                Some(weff) => {
                    let profile = hamming_profile(&categories[i], &categories[j])?;
                    d.push(sigmoid(1.0 - weighted_distance(&profile, weff)));
                    profiles.push(profile);
                }
                None => d.push(0.0),
            }
        }
    }

    let core = regularizer_core(&s, &d);
    let p = n_pairs as f64;
    let mean_residual = core.residuals.iter().sum::<f64>() / p;

    // dR/ds_p = 2/P (r_p - r̄), spread symmetrically into an n×n matrix.
    let mut coef = Array2::<f64>::zeros((n, n));
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            let c = 2.0 / p * (core.residuals[k] - mean_residual);
            coef[[i, j]] = c;
            coef[[j, i]] = c;
            k += 1;
        }
    }
    // ds_ij/dg_i = (u_j - s_ij u_i) / |g_i|
    let mut grad_g = coef.dot(&unit);
    let cosines = unit.dot(&unit.t());
    for i in 0..n {
        let along: f64 = (0..n).map(|j| coef[[i, j]] * cosines[[i, j]]).sum();
        let mut row = grad_g.row_mut(i);
        row.scaled_add(-along, &unit.row(i));
        row /= norms[i];
    }

    let mut grad_w = vec![0.0; dim];
    if matches!(variant, Variant::Full | Variant::L2normW) {
        // dR/dδ_p = -2 r_p / P ; dδ/dw_k = -δ(1-δ) h_k
        let mut grad_eff = vec![0.0; dim];
        for ((profile, &dp), &r) in profiles.iter().zip(&d).zip(&core.residuals) {
            let c = 2.0 / p * r * dp * (1.0 - dp);
            for (gk, &h) in grad_eff.iter_mut().zip(profile) {
                if h == 1 {
                    *gk += c;
                }
            }
        }
        if variant == Variant::Full {
            grad_w = grad_eff;
        } else {
            // Through u = w / |w|: (I - u uᵀ) / |w|.
            let u: Vec<f64> = w.0.iter().map(|v| v / w_norm).collect();
            let proj = dot(&u, &grad_eff);
            grad_w = grad_eff
                .iter()
                .zip(&u)
                .map(|(gk, uk)| (gk - proj * uk) / w_norm)
                .collect();
        }
    }

    Ok(AsmrOutput {
        value: core.value,
        mu: order_free_sum(&s) / p,
        grad_g,
        grad_w,
    })
}
