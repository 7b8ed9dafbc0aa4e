//! Spectral summaries of weight matrices.
//!
//! `κ(Z_1, …, Z_p) = max_i (1 − ‖Z_i‖₂/‖Z_i‖_F)` is zero exactly when every
//! `Z_i` has rank one, and `ρ(Z_1, …, Z_p) = max_i ‖max(0, −Z_i)‖_F/‖Z_i‖_F` is
//! zero exactly when every `Z_i` is entrywise non-negative. Singular values come
//! from power iteration on the Gram matrix `ZᵀZ` with deflation for the second
//! one; the iteration starts from the normalized all-ones vector.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatrixSummary {
    pub frobenius: f64,
    pub spectral: f64,
    pub top2_singular: Option<(f64, f64)>,
    pub kappa_term: f64,
    pub rho_term: f64,
}

pub fn frobenius(z: ArrayView2<'_, f64>) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Dominant eigenpair of the symmetric PSD matrix `g`, with iterates kept
/// orthogonal to `against` when given. Stops when the eigen-residual
/// `‖Gv − λv‖` drops below `tol·max(λ, floor)`.
fn power_iteration(
    g: &Array2<f64>,
    start: Array1<f64>,
    against: Option<&Array1<f64>>,
    floor: f64,
    tol: f64,
    max_iter: usize,
) -> std::result::Result<(f64, Array1<f64>), (f64, Array1<f64>)> {
    let project = |v: &mut Array1<f64>| {
        if let Some(q) = against {
            let c = q.dot(v);
            v.scaled_add(-c, q);
        }
    };
    let mut v = start;
    project(&mut v);
    let n0 = norm(v.view());
    if n0 == 0.0 {
        return Ok((0.0, v));
    }
    v /= n0;
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let mut gv = g.dot(&v);
        project(&mut gv);
        lambda = v.dot(&gv);
        let residual = norm((&gv - &(lambda * &v)).view());
        if residual <= tol * lambda.max(floor) {
            return Ok((lambda.max(0.0), v));
        }
        let gn = norm(gv.view());
        if gn == 0.0 {
            return Ok((0.0, v));
        }
        v = gv / gn;
    }
    Err((lambda, v))
}

fn fallback_start(z: ArrayView2<'_, f64>) -> Array1<f64> {
    let cols = z.ncols();
    let best = (0..cols)
        .map(|j| (j, norm(z.column(j))))
        .fold((0, -1.0), |acc, (j, n)| if n > acc.1 { (j, n) } else { acc })
        .0;
    let mut e = Array1::zeros(cols);
    e[best] = 1.0;
    e
}

/// Top right singular vector and value of a nonzero `z`.
fn top_right(z: ArrayView2<'_, f64>, tol: f64, max_iter: usize) -> Result<(f64, Array1<f64>, Array2<f64>)> {
    if z.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroInput("matrix is identically zero".into()));
    }
    let g = z.t().dot(&z);
    let cols = z.ncols();
    let ones = Array1::from_elem(cols, 1.0 / (cols as f64).sqrt());
    let run = |start| power_iteration(&g, start, None, 0.0, tol, max_iter);
    let (_, v) = match run(ones) {
        // all-ones in the null space of ZᵀZ: restart once from the heaviest column
        Ok((l, _)) if l == 0.0 => run(fallback_start(z)),
        other => other,
    }
    .map_err(|(l, _)| Error::NoConvergence {
        iters: max_iter,
        estimate: l.max(0.0).sqrt(),
    })?;
    let s = norm(z.dot(&v).view());
    Ok((s, v, g))
}

pub fn spectral_norm(z: ArrayView2<'_, f64>, tol: f64, max_iter: usize) -> Result<f64> {
    Ok(top_right(z, tol, max_iter)?.0)
}

/// The two largest singular values, by power iteration and one deflation.
pub fn top2_singular(z: ArrayView2<'_, f64>) -> Result<(f64, f64)> {
    top2_singular_with(z, DEFAULT_TOL, DEFAULT_MAX_ITER)
}

pub fn top2_singular_with(z: ArrayView2<'_, f64>, tol: f64, max_iter: usize) -> Result<(f64, f64)> {
    if z.nrows().min(z.ncols()) < 2 {
        return Err(Error::Shape(format!("need at least a 2x2 matrix, got {:?}", z.dim())));
    }
    let (s1, v1, g) = top_right(z, tol, max_iter)?;
    let lambda1 = s1 * s1;
    let cols = z.ncols();
    let ones = Array1::from_elem(cols, 1.0 / (cols as f64).sqrt());
    // The deflated Gram matrix carries roundoff of order eps·λ1, so the
    // residual test is absolute below 1e-2·λ1. The singular value is read off
    // as ‖Zv‖, which stays accurate for tiny s2.
    let floor = 1e-2 * lambda1;
    let attempt = power_iteration(&g, ones, Some(&v1), floor, tol, max_iter);
    let attempt = match attempt {
        Ok((l, _)) if l == 0.0 => {
            let mut e = Array1::zeros(cols);
            let j = v1
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (j, &x)| if x.abs() < acc.1 { (j, x.abs()) } else { acc })
                .0;
            e[j] = 1.0;
            power_iteration(&g, e, Some(&v1), floor, tol, max_iter)
        }
        other => other,
    };
    let (_, v2) = attempt.map_err(|(l, _)| Error::NoConvergence {
        iters: max_iter,
        estimate: l.max(0.0).sqrt(),
    })?;
    let s2 = norm(z.dot(&v2).view());
    Ok((s1, s2.min(s1)))
}

fn check_nonzero(z: ArrayView2<'_, f64>, index: usize) -> Result<f64> {
    let f = frobenius(z);
    if f == 0.0 {
        return Err(Error::ZeroInput(format!("input {index} is zero")));
    }
    Ok(f)
}

pub fn kappa_term(z: ArrayView2<'_, f64>) -> Result<f64> {
    let f = check_nonzero(z, 0)?;
    let s = spectral_norm(z, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    Ok((1.0 - s / f).clamp(0.0, 1.0))
}

pub fn kappa(zs: &[ArrayView2<'_, f64>]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (i, z) in zs.iter().enumerate() {
        check_nonzero(*z, i)?;
        worst = worst.max(kappa_term(*z)?);
    }
    Ok(worst)
}

pub fn rho_term(z: ArrayView2<'_, f64>) -> Result<f64> {
    let f = check_nonzero(z, 0)?;
    let neg = z.iter().map(|&v| if v < 0.0 { v * v } else { 0.0 }).sum::<f64>().sqrt();
    Ok(neg / f)
}

/// Vectors are passed as single-column matrices, whose Frobenius norm is the
/// Euclidean norm.
pub fn rho(zs: &[ArrayView2<'_, f64>]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (i, z) in zs.iter().enumerate() {
        check_nonzero(*z, i)?;
        worst = worst.max(rho_term(*z)?);
    }
    Ok(worst)
}

pub fn as_column(v: &Array1<f64>) -> ArrayView2<'_, f64> {
    v.view().insert_axis(Axis(1))
}

pub fn summarize(z: ArrayView2<'_, f64>) -> Result<MatrixSummary> {
    let frobenius = check_nonzero(z, 0)?;
    let top2 = if z.nrows().min(z.ncols()) >= 2 {
        Some(top2_singular(z)?)
    } else {
        None
    };
    let spectral = match top2 {
        Some((s1, _)) => s1,
        None => spectral_norm(z, DEFAULT_TOL, DEFAULT_MAX_ITER)?,
    };
    Ok(MatrixSummary {
        frobenius,
        spectral,
        top2_singular: top2,
        kappa_term: (1.0 - spectral / frobenius).clamp(0.0, 1.0),
        rho_term: rho_term(z)?,
    })
}

/// Best rank-one approximation `abᵀ` with `‖a‖ = ‖b‖ = √σ₁`, signed so that
/// the largest-magnitude entry of `a` is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOneFactor {
    pub a: Array1<f64>,
    pub b: Array1<f64>,
    pub sigma: f64,
}

impl RankOneFactor {
    pub fn outer(&self) -> Array2<f64> {
        outer(&self.a, &self.b)
    }
}

pub fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let col = a.view().insert_axis(Axis(1));
    let row = b.view().insert_axis(Axis(0));
    col.dot(&row)
}

pub fn factor_rank_one(z: ArrayView2<'_, f64>) -> Result<RankOneFactor> {
    let (sigma, v, _) = top_right(z, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let u = z.dot(&v) / sigma;
    let root = sigma.sqrt();
    let mut a = u * root;
    let mut b = v * root;
    let lead = a.iter().fold(0.0f64, |acc, &x| if x.abs() > acc.abs() { x } else { acc });
    if lead < 0.0 {
        a.mapv_inplace(|x| -x);
        b.mapv_inplace(|x| -x);
    }
    Ok(RankOneFactor { a, b, sigma })
}

#[cfg(test)]
pub(crate) mod oracle {
    use ndarray::{Array2, ArrayView2};

    /// Singular values by one-sided Jacobi rotations, sorted descending.
    pub fn jacobi_singular_values(z: ArrayView2<'_, f64>) -> Vec<f64> {
        let mut a: Array2<f64> = if z.nrows() >= z.ncols() { z.to_owned() } else { z.t().to_owned() };
        let n = a.ncols();
        for _sweep in 0..100 {
            let mut off = 0.0f64;
            for p in 0..n {
                for q in p + 1..n {
                    let alpha: f64 = a.column(p).dot(&a.column(p));
                    let beta: f64 = a.column(q).dot(&a.column(q));
                    let gamma: f64 = a.column(p).dot(&a.column(q));
                    if gamma == 0.0 {
                        continue;
                    }
                    off = off.max(gamma.abs() / (alpha * beta).sqrt());
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let t = if zeta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..a.nrows() {
                        let ap = a[[i, p]];
                        let aq = a[[i, q]];
                        a[[i, p]] = c * ap - s * aq;
                        a[[i, q]] = s * ap + c * aq;
                    }
                }
            }
            if off < 1e-15 {
                break;
            }
        }
        let mut s: Vec<f64> = (0..n).map(|j| a.column(j).dot(&a.column(j)).sqrt()).collect();
        s.sort_by(|x, y| y.partial_cmp(x).unwrap());
        s
    }
}
