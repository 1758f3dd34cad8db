//! Angular-margin softmax that pulls each feature embedding toward its
//! category prototype and away from every other prototype.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::semantic::normalize_rows;
use crate::error::{Error, Result};

/// Cosines are clamped to `[-1 + ε, 1 - ε]` wherever `1/sin(angle)` appears.
pub const ARCCOS_EPS: f64 = 1e-7;

/// Inputs whose norm deviates from 1 by more than this are rejected.
pub const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct AlignmentOutput {
    pub value: f64,
    pub grad_f: Array2<f64>,
    pub grad_g: Array2<f64>,
}

fn check_unit(norms: &Array1<f64>, what: &str) -> Result<()> {
    for (i, &n) in norms.iter().enumerate() {
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Data(format!(
                "{what} {i} is not unit norm (|x| = {n})"
            )));
        }
    }
    Ok(())
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean over rows of `f` of
/// `-log(e^{σ cos(a_t + γ)} / (e^{σ cos(a_t + γ)} + Σ_{k≠t} e^{σ cos a_k}))`
/// where `a_k` is the angle between `f_i` and prototype `g_k` and `t` is
/// the row's assigned prototype.
pub fn ma_loss(
    f: ArrayView2<'_, f64>,
    assignment: &[usize],
    g: ArrayView2<'_, f64>,
    sigma: f64,
    gamma: f64,
) -> Result<AlignmentOutput> {
    let m = f.nrows();
    let n = g.nrows();
    if n == 0 {
        return Err(Error::Data("empty prototype set".into()));
    }
    if m == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if assignment.len() != m {
        return Err(Error::Dimension {
            context: "assignment length",
            expected: m,
            got: assignment.len(),
        });
    }
    if f.ncols() != g.ncols() {
        return Err(Error::Dimension {
            context: "embedding width",
            expected: g.ncols(),
            got: f.ncols(),
        });
    }
    if let Some(&bad) = assignment.iter().find(|&&t| t >= n) {
        return Err(Error::Data(format!(
            "assignment {bad} out of range for {n} prototypes"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("scale must be > 0, got {sigma}")));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("margin must be >= 0, got {gamma}")));
    }

    let (uf, nf) = normalize_rows(f)?;
    let (ug, ng) = normalize_rows(g)?;
    check_unit(&nf, "feature embedding")?;
    check_unit(&ng, "category embedding")?;

    let cos = uf.dot(&ug.t());
    // d(loss)/d(cos) per entry, already divided by m.
    let mut coef = Array2::<f64>::zeros((m, n));
    let mut total = 0.0;
    let mut logits = vec![0.0; n];
    let mut slopes = vec![0.0; n];
    let lo = -1.0 + ARCCOS_EPS;
    let hi = 1.0 - ARCCOS_EPS;
    for i in 0..m {
        let t = assignment[i];
        for k in 0..n {
            let c = cos[[i, k]];
            let inside = c.abs() <= 1.0;
            let cc = c.clamp(-1.0, 1.0);
            if k == t {
                let angle = cc.acos();
                logits[k] = sigma * (angle + gamma).cos();
                let ce = c.clamp(lo, hi);
                let ae = ce.acos();
                slopes[k] = sigma * (ae + gamma).sin() / (1.0 - ce * ce).sqrt();
            } else {
                logits[k] = sigma * cc;
                slopes[k] = if inside { sigma } else { 0.0 };
            }
        }
        let lse = log_sum_exp(&logits);
        total += lse - logits[t];
        for k in 0..n {
            let p = (logits[k] - lse).exp();
            let target = if k == t { 1.0 } else { 0.0 };
            coef[[i, k]] = (p - target) * slopes[k] / m as f64;
        }
    }
    let value = total / m as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("alignment loss".into()));
    }

    // dcos(f,g)/df = (u_g - cos u_f) / |f|, and symmetrically for g.
    let along = (&coef * &cos).sum_axis(Axis(1));
    let mut grad_f = coef.dot(&ug);
    for i in 0..m {
        let mut row = grad_f.row_mut(i);
        row.scaled_add(-along[i], &uf.row(i));
        row /= nf[i];
    }
    let along_g = (&coef * &cos).sum_axis(Axis(0));
    let mut grad_g = coef.t().dot(&uf);
    for k in 0..n {
        let mut row = grad_g.row_mut(k);
        row.scaled_add(-along_g[k], &ug.row(k));
        row /= ng[k];
    }
    Ok(AlignmentOutput {
        value,
        grad_f,
        grad_g,
    })
}
