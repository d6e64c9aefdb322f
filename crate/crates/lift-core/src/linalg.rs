//! Small dense linear algebra: symmetric eigendecomposition by cyclic
//! Jacobi rotations, PSD matrix square roots, and a 2-component PCA.
//!
//! Matrix arguments are row-major `n x n` slices. Sizes here stay in the
//! low hundreds (feature covariances, context covariances), where Jacobi
//! is plenty fast and, unlike iterative Lanczos-style methods, fully
//! deterministic.

use crate::error::{Error, Result};

/// Row-major identity.
fn identity(n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    v
}

fn off_diagonal_norm(n: usize, a: &[f64]) -> f64 {
    let mut s = 0.0;
    for p in 0..n {
        for q in (p + 1)..n {
            s += a[p * n + q] * a[p * n + q];
        }
    }
    s.sqrt()
}

fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// the columns of a row-major matrix. Each eigenvector is sign-fixed so
/// its largest-magnitude component is positive, which keeps downstream
/// projections reproducible.
pub fn sym_eigen(n: usize, a_in: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if a_in.len() != n * n {
        return Err(Error::shape(
            "sym_eigen",
            format!("expected {n}x{n} = {} entries, got {}", n * n, a_in.len()),
        ));
    }
    for p in 0..n {
        for q in (p + 1)..n {
            if (a_in[p * n + q] - a_in[q * n + p]).abs()
                > 1e-9 * (1.0 + a_in[p * n + q].abs())
            {
                return Err(Error::shape(
                    "sym_eigen",
                    format!("matrix not symmetric at ({p},{q})"),
                ));
            }
        }
    }

    let mut a = a_in.to_vec();
    let mut v = identity(n);
    let scale = frobenius(&a).max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        if off_diagonal_norm(n, &a) <= 1e-14 * scale {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A <- J^T A J, columns then rows.
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[i * n + i]
            .partial_cmp(&a[j * n + j])
            .expect("eigenvalues are finite")
    });

    let mut vals = vec![0.0; n];
    let mut vecs = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        vals[dst] = a[src * n + src];
        // Sign fix: largest-magnitude component positive.
        let mut best = 0;
        let mut best_abs = -1.0;
        for r in 0..n {
            let x = v[r * n + src].abs();
            if x > best_abs {
                best_abs = x;
                best = r;
            }
        }
        let flip = if v[best * n + src] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vecs[r * n + dst] = flip * v[r * n + src];
        }
    }
    Ok((vals, vecs))
}

/// Row-major product of two n x n matrices.
pub fn mat_mul(n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let row = &b[k * n..(k + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in dst.iter_mut().zip(row.iter()) {
                *o += aik * bv;
            }
        }
    }
    out
}

pub fn trace(n: usize, a: &[f64]) -> f64 {
    (0..n).map(|i| a[i * n + i]).sum()
}

/// Square root of a symmetric PSD matrix via its eigendecomposition.
/// Eigenvalues below zero are clamped and counted so callers can warn.
pub fn sqrt_psd(n: usize, a: &[f64]) -> Result<(Vec<f64>, usize)> {
    let (vals, vecs) = sym_eigen(n, a)?;
    let clamped = vals.iter().filter(|&&l| l < 0.0).count();
    let mut out = vec![0.0; n * n];
    for j in 0..n {
        let s = vals[j].max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for r in 0..n {
            let vr = vecs[r * n + j] * s;
            if vr == 0.0 {
                continue;
            }
            for c in 0..n {
                out[r * n + c] += vr * vecs[c * n + j];
            }
        }
    }
    Ok((out, clamped))
}

/// First two principal axes of a point set (rows are observations).
///
/// Returns the mean, the two axes, and the per-point 2-D projections.
/// Fails if the points have no variance at all.
pub struct Pca2 {
    pub mean: Vec<f64>,
    pub axis1: Vec<f64>,
    pub axis2: Vec<f64>,
    pub var1: f64,
    pub var2: f64,
    pub projected: Vec<[f64; 2]>,
}

pub fn pca2(points: &[Vec<f64>]) -> Result<Pca2> {
    let n = points.len();
    if n < 2 {
        return Err(Error::degenerate("pca", format!("{n} points, need >= 2")));
    }
    let d = points[0].len();
    if d < 2 || points.iter().any(|p| p.len() != d) {
        return Err(Error::shape("pca", "ragged or sub-2-dimensional points"));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, &x) in mean.iter_mut().zip(p.iter()) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for p in points {
        for i in 0..d {
            let ci = p[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += ci * (p[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n as f64 - 1.0);
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let (vals, vecs) = sym_eigen(d, &cov)?;
    let var1 = vals[d - 1];
    let var2 = vals[d - 2];
    if var1 <= 0.0 || !var1.is_finite() {
        return Err(Error::degenerate("pca", "point set has zero variance"));
    }
    let axis1: Vec<f64> = (0..d).map(|r| vecs[r * d + (d - 1)]).collect();
    let axis2: Vec<f64> = (0..d).map(|r| vecs[r * d + (d - 2)]).collect();
    let projected = points
        .iter()
        .map(|p| {
            let mut u = 0.0;
            let mut v = 0.0;
            for i in 0..d {
                let c = p[i] - mean[i];
                u += c * axis1[i];
                v += c * axis2[i];
            }
            [u, v]
        })
        .collect();
    Ok(Pca2 {
        mean,
        axis1,
        axis2,
        var1,
        var2,
        projected,
    })
}
