//! Gradient projections for GEM and A-GEM, and the non-negative QP that GEM
//! solves in its dual.

use log::debug;
use nalgebra::{DMatrix, DVector};

use crate::autodiff::GradientVector;
use crate::error::{Error, Result};

pub const QP_MAX_ITERS: usize = 200;
pub const QP_TOLERANCE: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Least-squares solve of `h[p, p] s = -b[p]` through the SVD pseudo-inverse,
/// so dependent reference gradients (a singular Gram block) are handled.
fn solve_passive(h: &[Vec<f64>], b: &[f64], passive: &[usize]) -> Vec<f64> {
    let m = passive.len();
    let a = DMatrix::from_fn(m, m, |i, j| h[passive[i]][passive[j]]);
    let rhs = DVector::from_fn(m, |i, _| -b[passive[i]]);
    let svd = a.svd(true, true);
    let cutoff = svd.singular_values.max() * 1e-12 * m as f64;
    let s = svd.solve(&rhs, cutoff).expect("SVD computed with both factors");
    let mut out = vec![0.0; b.len()];
    for (i, &p) in passive.iter().enumerate() {
        out[p] = s[i];
    }
    out
}

/// Stationarity and complementarity residuals of `v` for
/// `min 0.5 v'Hv + b'v, v >= 0`.
pub fn kkt_residuals(h: &[Vec<f64>], b: &[f64], v: &[f64]) -> (f64, f64) {
    let mut stationarity: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    for j in 0..b.len() {
        let grad = dot(&h[j], v) + b[j];
        if v[j] > 0.0 {
            stationarity = stationarity.max(grad.abs());
        } else {
            complementarity = complementarity.max((-grad).max(0.0)).max((-v[j]).max(0.0));
        }
    }
    (stationarity, complementarity)
}

/// Minimizes `0.5 v'Hv + b'v` over `v >= 0` for symmetric positive
/// semidefinite `H` with a Lawson-Hanson style active-set method.
///
/// `tol` is relative to `1 + max|H| + max|b|`.
pub fn solve_dual_qp(h: &[Vec<f64>], b: &[f64], max_iters: usize, tol: f64) -> Result<Vec<f64>> {
    let k = b.len();
    if h.len() != k || h.iter().any(|row| row.len() != k) {
        return Err(Error::Usage(format!("QP matrix must be {k}x{k} to match b")));
    }
    let scale = 1.0
        + h.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()))
        + b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol_abs = tol * scale;
    let mut v = vec![0.0; k];
    let mut passive: Vec<usize> = Vec::new();
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        // most violated dual-feasibility condition among the bound variables
        let entering = (0..k)
            .filter(|j| !passive.contains(j))
            .map(|j| (j, dot(&h[j], &v) + b[j]))
            .filter(|&(_, g)| g < -tol_abs)
            .min_by(|a, c| a.1.total_cmp(&c.1));
        let Some((j, _)) = entering else { break };
        passive.push(j);

        loop {
            let s = solve_passive(h, b, &passive);
            if passive.iter().all(|&p| s[p] > 0.0) {
                v = s;
                break;
            }
            iterations += 1;
            if iterations >= max_iters {
                break;
            }
            let alpha = passive
                .iter()
                .filter(|&&p| s[p] <= 0.0)
                .map(|&p| v[p] / (v[p] - s[p]))
                .fold(f64::INFINITY, f64::min);
            for p in &passive {
                v[*p] += alpha * (s[*p] - v[*p]);
            }
            passive.retain(|&p| {
                if v[p] <= tol_abs * 1e-3 {
                    v[p] = 0.0;
                    false
                } else {
                    true
                }
            });
            if passive.is_empty() {
                break;
            }
        }
    }

    let (stationarity, complementarity) = kkt_residuals(h, b, &v);
    if stationarity > tol_abs || complementarity > tol_abs {
        return Err(Error::QpNonConvergence {
            iterations,
            stationarity,
            complementarity,
            tolerance: tol_abs,
        });
    }
    Ok(v)
}

/// Closest gradient to `g` with `<z, g_k> >= margin` for every reference
/// `g_k`; `g` itself when it already satisfies them all.
pub fn gem_project(g: &GradientVector, references: &[GradientVector], margin: f64) -> Result<GradientVector> {
    if !(margin >= 0.0) {
        return Err(Error::Config(format!("GEM margin must be non-negative, got {margin}")));
    }
    if let Some(r) = references.iter().find(|r| r.len() != g.len()) {
        return Err(Error::Usage(format!(
            "reference gradient of length {} does not match gradient of length {}",
            r.len(),
            g.len()
        )));
    }
    let refs: Vec<&GradientVector> = references
        .iter()
        .filter(|r| {
            let keep = r.values().iter().any(|&x| x != 0.0);
            if !keep {
                debug!("skipping an all-zero GEM reference gradient");
            }
            keep
        })
        .collect();
    if refs.iter().all(|r| g.dot(r) >= margin) {
        return Ok(g.clone());
    }
    let h: Vec<Vec<f64>> = refs
        .iter()
        .map(|a| refs.iter().map(|c| a.dot(c)).collect())
        .collect();
    let b: Vec<f64> = refs.iter().map(|r| r.dot(g) - margin).collect();
    let v = solve_dual_qp(&h, &b, QP_MAX_ITERS, QP_TOLERANCE)?;
    let mut z = g.clone();
    for (r, &vk) in refs.iter().zip(&v) {
        if vk != 0.0 {
            z.add_scaled(vk, r.values());
        }
    }
    Ok(z)
}

/// `g` when it does not oppose `g_ref`, otherwise `g` with its component
/// along `g_ref` removed.
pub fn agem_project(g: &GradientVector, g_ref: &GradientVector) -> GradientVector {
    let d = g.dot(g_ref);
    if d >= 0.0 {
        return g.clone();
    }
    let nn = g_ref.dot(g_ref);
    if nn == 0.0 {
        debug!("A-GEM reference gradient is zero; gradient left unchanged");
        return g.clone();
    }
    let mut out = g.clone();
    out.add_scaled(-d / nn, g_ref.values());
    out
}
