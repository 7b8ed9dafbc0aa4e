//! Projected ascent for piecewise-linear activations whose iterates settle on
//! activation kinks.
//!
//! With `σ(x) = max(x, αx)`, `α ≠ 1`, the maximizers of the correlation on
//! the sphere typically place some examples exactly on a first-layer kink,
//! `w_kᵀx_j = 0`. There the selected gradient is never parallel to the
//! weights, so plain projected ascent oscillates around the kink. This module
//! keeps the kinked pairs on the kink (each kinked row is projected onto the
//! orthogonal complement of its kinked inputs) and certifies stationarity by
//! choosing the first-layer slope of every kinked pair in `[min(α,1),
//! max(α,1)]`, with unit slopes above the first layer for examples that are
//! kinked in every live row. Any such choice is an element of the chain-rule
//! set that contains the Clarke subdifferential.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ncf::NcfProblem;
use crate::net::{kink_split_gradient, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KinkConfig {
    pub step: f64,
    pub max_iters: usize,
    /// Pairs with `|w_kᵀx_j| ≤ detect_tol·‖w_k‖‖x_j‖` start on the kink.
    pub detect_tol: f64,
    pub stop_alignment: f64,
    /// Kink-set alignment at which pairs with inadmissible slopes are released.
    pub release_alignment: f64,
    /// Rows shorter than this fraction of the longest first-layer row are dead.
    pub alive_tol: f64,
    /// Iterations during which a released pair may not be captured again.
    pub cooldown: usize,
    /// Give up when the best alignment gap has not halved for this many
    /// iterations.
    pub patience: usize,
}

impl Default for KinkConfig {
    fn default() -> Self {
        Self {
            step: 1e-2,
            max_iters: 100_000,
            detect_tol: 1e-2,
            stop_alignment: 1.0 - 1e-10,
            release_alignment: 1.0 - 1e-6,
            alive_tol: 1e-8,
            cooldown: 1_000,
            patience: 20_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KinkRun {
    pub weights: Weights,
    /// `(unit, example)` pairs held on the kink at the end.
    pub kinks: Vec<(usize, usize)>,
    /// Certified first-layer slope for each kinked pair.
    pub slopes: Vec<f64>,
    pub alignment: f64,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Stationarity measures at a point on the kink set.
#[derive(Debug, Clone)]
pub struct KinkCertificate {
    /// Alignment with the best slopes inside the admissible interval.
    pub alignment: f64,
    pub residual: f64,
    /// Alignment with unrestricted slopes: convergence on the kink set.
    pub manifold_alignment: f64,
    pub slopes: Vec<((usize, usize), f64)>,
    /// Pair whose unrestricted slope leaves the interval the most, the
    /// amount, and the side of the kink it wants (+1 or −1).
    pub worst: Option<((usize, usize), f64, f64)>,
    gradient: Weights,
}

struct Geometry {
    alive: Vec<bool>,
    dead_examples: Vec<bool>,
}

fn row_norms(w: &Weights) -> Vec<f64> {
    w.layer(0).axis_iter(Axis(0)).map(|r| r.dot(&r).sqrt()).collect()
}

fn geometry(w: &Weights, mask: &Array2<bool>, alive_tol: f64) -> Geometry {
    let norms = row_norms(w);
    let top = norms.iter().cloned().fold(0.0, f64::max);
    let alive: Vec<bool> = norms.iter().map(|&r| r > alive_tol * top && r > 0.0).collect();
    let dead_examples = (0..mask.ncols())
        .map(|j| {
            let mut any = false;
            let mut all = true;
            for (k, &a) in alive.iter().enumerate() {
                if a {
                    any = true;
                    all &= mask[[k, j]];
                }
            }
            any && all
        })
        .collect();
    Geometry { alive, dead_examples }
}

/// Removes from every kinked row its components along the kinked inputs,
/// then rescales to the unit sphere.
fn project(w: &mut Weights, mask: &Array2<bool>, x: ndarray::ArrayView2<'_, f64>) {
    let d = x.nrows();
    for k in 0..mask.nrows() {
        let cols: Vec<usize> = (0..mask.ncols()).filter(|&j| mask[[k, j]]).collect();
        if cols.is_empty() {
            continue;
        }
        let mut basis: Vec<Array1<f64>> = Vec::new();
        for &j in &cols {
            let mut v = x.column(j).to_owned();
            for _ in 0..2 {
                for b in &basis {
                    let c = b.dot(&v);
                    v.scaled_add(-c, b);
                }
            }
            let n = v.dot(&v).sqrt();
            if n > 1e-10 * x.column(j).dot(&x.column(j)).sqrt() {
                basis.push(v / n);
            }
            if basis.len() == d {
                break;
            }
        }
        let mut layer = w.layer_mut(0);
        let mut row = layer.row_mut(k);
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&row);
                row.scaled_add(-c, b);
            }
        }
    }
    let n = w.norm();
    if n > 0.0 {
        for v in w.flat_mut() {
            *v /= n;
        }
    }
}

/// `Gπ = b` by Gaussian elimination with partial pivoting, with a tiny ridge
/// so that repeated kinked inputs stay solvable.
fn solve_small(gram: &Array2<f64>, rhs: &Array1<f64>) -> Array1<f64> {
    let m = rhs.len();
    let ridge = 1e-14 * gram.diag().iter().sum::<f64>().max(f64::MIN_POSITIVE);
    let mut a = gram.clone();
    let mut b = rhs.clone();
    for i in 0..m {
        a[[i, i]] += ridge;
    }
    for c in 0..m {
        let pivot = (c..m).max_by(|&i, &j| a[[i, c]].abs().total_cmp(&a[[j, c]].abs())).unwrap();
        if a[[pivot, c]] == 0.0 {
            continue;
        }
        if pivot != c {
            for col in 0..m {
                a.swap([c, col], [pivot, col]);
            }
            b.swap(c, pivot);
        }
        for r in c + 1..m {
            let f = a[[r, c]] / a[[c, c]];
            if f != 0.0 {
                for col in c..m {
                    a[[r, col]] -= f * a[[c, col]];
                }
                b[r] -= f * b[c];
            }
        }
    }
    let mut x = Array1::zeros(m);
    for c in (0..m).rev() {
        if a[[c, c]] == 0.0 {
            continue;
        }
        let s: f64 = (c + 1..m).map(|k| a[[c, k]] * x[k]).sum();
        x[c] = (b[c] - s) / a[[c, c]];
    }
    x
}

/// `min ‖r + Aπ‖` subject to `lo ≤ π ≤ hi`, given `AᵀA` and `Aᵀr`: the
/// unrestricted solution when it is admissible, otherwise coordinate descent
/// started from its clamped value.
fn box_least_squares(gram: &Array2<f64>, atr: &Array1<f64>, lo: f64, hi: f64) -> Array1<f64> {
    let free = solve_small(gram, &atr.mapv(|v| -v));
    if free.iter().all(|&p| p >= lo && p <= hi) {
        return free;
    }
    let mut pi = free.mapv(|p| p.clamp(lo, hi));
    let scale = gram.diag().iter().cloned().fold(0.0, f64::max);
    for _ in 0..5_000 {
        let mut decrease: f64 = 0.0;
        for j in 0..pi.len() {
            let gjj = gram[[j, j]];
            if gjj <= 0.0 {
                continue;
            }
            let rest = atr[j] + gram.row(j).dot(&pi) - gjj * pi[j];
            let next = (-rest / gjj).clamp(lo, hi);
            let step = next - pi[j];
            decrease = decrease.max(gjj * step * step);
            pi[j] = next;
        }
        if decrease <= 1e-30 * scale {
            break;
        }
    }
    pi
}

pub fn certify(prob: &NcfProblem, w: &Weights, mask: &Array2<bool>, alive_tol: f64) -> Result<KinkCertificate> {
    let norm = w.norm();
    if norm == 0.0 {
        return Err(Error::ZeroInput("kink certificate needs nonzero weights".into()));
    }
    let unit = w.scaled(1.0 / norm);
    let geo = geometry(&unit, mask, alive_tol);
    let x = prob.data.x.view();
    let (g, sens) = kink_split_gradient(&prob.spec, &unit, x, prob.z.view(), mask.view(), &geo.dead_examples)?;
    let lambda = unit.dot(&g);
    let mut tangential: Vec<f64> = g.flat().iter().zip(unit.flat()).map(|(gi, ui)| gi - lambda * ui).collect();
    let alpha = prob.spec.alpha;
    let (lo, hi) = (alpha.min(1.0), alpha.max(1.0));

    let cols = prob.spec.widths[0];
    let mut boxed_sq = 0.0;
    let mut free_sq = 0.0;
    let mut slopes = Vec::new();
    let mut worst: Option<((usize, usize), f64, f64)> = None;
    for k in 0..mask.nrows() {
        let kinked: Vec<usize> = (0..mask.ncols()).filter(|&j| mask[[k, j]] && geo.alive[k]).collect();
        if kinked.is_empty() {
            continue;
        }
        let r = ArrayView1::from(&tangential[k * cols..(k + 1) * cols]).to_owned();
        let a: Vec<Array1<f64>> = kinked.iter().map(|&j| x.column(j).to_owned() * sens[[k, j]]).collect();
        let m = a.len();
        let gram = Array2::from_shape_fn((m, m), |(i, j)| a[i].dot(&a[j]));
        let atr: Array1<f64> = a.iter().map(|ai| ai.dot(&r)).collect();
        let residual = |pi: &Array1<f64>| {
            let mut out = r.clone();
            for (ai, &p) in a.iter().zip(pi) {
                out.scaled_add(p, ai);
            }
            out
        };
        let boxed = box_least_squares(&gram, &atr, lo, hi);
        let free = solve_small(&gram, &atr.mapv(|v| -v));
        let rb = residual(&boxed);
        let rf = residual(&free);
        boxed_sq += rb.dot(&rb);
        free_sq += rf.dot(&rf);
        for (idx, &j) in kinked.iter().enumerate() {
            slopes.push(((k, j), boxed[idx]));
            let s = sens[[k, j]];
            if s == 0.0 {
                continue;
            }
            let p = free[idx];
            let (excess, side) = if p > hi {
                (p - hi, -s.signum())
            } else if p < lo {
                (lo - p, s.signum())
            } else {
                continue;
            };
            if worst.is_none_or(|(_, e, _)| excess > e) {
                worst = Some(((k, j), excess, side));
            }
        }
        // the kinked rows are replaced by their certified residuals below
        for c in 0..cols {
            tangential[k * cols + c] = 0.0;
        }
    }
    let rest: f64 = tangential.iter().map(|v| v * v).sum();
    let boxed_res = (rest + boxed_sq).sqrt();
    let free_res = (rest + free_sq).sqrt();
    let align = |res: f64| {
        let den = (lambda * lambda + res * res).sqrt();
        if den > 0.0 {
            lambda / den
        } else {
            0.0
        }
    };
    Ok(KinkCertificate {
        alignment: align(boxed_res),
        residual: boxed_res,
        manifold_alignment: align(free_res),
        slopes,
        worst,
        gradient: g,
    })
}

/// Pairs within `tol` of the kink, relative to row and input norms.
pub fn detect_kinks(w: &Weights, x: ndarray::ArrayView2<'_, f64>, tol: f64, alive_tol: f64) -> Array2<bool> {
    let norms = row_norms(w);
    let top = norms.iter().cloned().fold(0.0, f64::max);
    let h = w.layer(0).dot(&x);
    let xn: Vec<f64> = x.axis_iter(Axis(1)).map(|c| c.dot(&c).sqrt()).collect();
    Array2::from_shape_fn(h.dim(), |(k, j)| {
        let r = norms[k];
        r > alive_tol * top && r > 0.0 && h[[k, j]].abs() <= tol * r * xn[j]
    })
}

/// Active-set projected ascent on the kink set, stopped by the certified
/// alignment. Pairs that cross a kink during a step are captured; a pair
/// whose unrestricted slope leaves the admissible interval once the iterate
/// has settled is released to the side it prefers.
pub fn ascend_on_kinks(prob: &NcfProblem, w0: &Weights, cfg: &KinkConfig) -> Result<KinkRun> {
    w0.check(&prob.spec)?;
    if !(cfg.step > 0.0) {
        return Err(Error::Precondition(format!("step must be positive, got {}", cfg.step)));
    }
    let x = prob.data.x.view();
    let mut w = w0.scaled(1.0 / w0.norm());
    let mut mask = detect_kinks(&w, x, cfg.detect_tol, cfg.alive_tol);
    let mut released = Array2::<usize>::zeros(mask.dim());
    project(&mut w, &mask, x);

    let mut it = 0usize;
    let mut best_gap = f64::INFINITY;
    let mut best_at = 0usize;
    loop {
        let cert = certify(prob, &w, &mask, cfg.alive_tol)?;
        let finished = cert.alignment >= cfg.stop_alignment;
        let gap = 1.0 - cert.alignment;
        if gap < 0.5 * best_gap {
            best_gap = gap;
            best_at = it;
        }
        let stalled = it - best_at >= cfg.patience;
        if finished || stalled || it >= cfg.max_iters {
            let (kinks, slopes) = cert.slopes.iter().cloned().unzip();
            return Ok(KinkRun {
                weights: w,
                kinks,
                slopes,
                alignment: cert.alignment,
                residual: cert.residual,
                iterations: it,
                converged: finished,
            });
        }
        if cert.manifold_alignment >= cfg.release_alignment {
            if let Some(((k, j), _, side)) = cert.worst {
                // an example kinked in every live row leaves the kink in all of them
                let geo = geometry(&w, &mask, cfg.alive_tol);
                let rows: Vec<usize> = if geo.dead_examples[j] {
                    (0..mask.nrows()).filter(|&r| mask[[r, j]]).collect()
                } else {
                    vec![k]
                };
                let norms = row_norms(&w);
                let xj = x.column(j).to_owned();
                let xn = xj.dot(&xj).sqrt();
                for r in rows {
                    mask[[r, j]] = false;
                    released[[r, j]] = it + cfg.cooldown;
                    w.layer_mut(0).row_mut(r).scaled_add(side * 1e-6 * norms[r] / xn, &xj);
                }
                it += 1;
                continue;
            }
        }
        let before = w.layer(0).dot(&x);
        for (wi, gi) in w.flat_mut().iter_mut().zip(cert.gradient.flat()) {
            *wi += cfg.step * gi;
        }
        project(&mut w, &mask, x);
        let after = w.layer(0).dot(&x);
        let geo = geometry(&w, &mask, cfg.alive_tol);
        let mut captured = false;
        for ((k, j), flag) in mask.indexed_iter_mut() {
            if !*flag && geo.alive[k] && released[[k, j]] <= it && before[[k, j]] * after[[k, j]] < 0.0 {
                *flag = true;
                captured = true;
            }
        }
        if captured {
            project(&mut w, &mask, x);
        }
        it += 1;
    }
}
