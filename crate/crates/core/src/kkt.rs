//! Rank-one KKT points of the sphere-constrained correlation
//! `max yᵀH(X; W_1, …, W_L)` s.t. `Σ_l ‖W_l‖_F² = 1`.
//!
//! A point `(a_1 b_1ᵀ, …, a_{L−1} b_{L−1}ᵀ, w̄ᵀ)` with `‖a_l‖ = ‖b_l‖` is built
//! from a KKT point `b_1` of the one-vector problem
//! `max Σ_i y_i σ^{L−1}(x_iᵀu)` s.t. `‖u‖² = r²`, by fixing
//!
//! - `‖a_l‖⁴ = p^{L−l}/p̂` and `‖w̄‖² = 1/p̂`, with `p̂ = p^{L−1} + ⋯ + 1`;
//! - `b_{l+1} = q_l a_l / p^{1/4}` and `w̄ = q_{L−1} a_{L−1} / (p p̂)^{1/4}`
//!   (absolute values of `a_l` for even `p` with `α = 1`);
//! - non-negative `a_l` whose nonzero entries are identical when `p ≥ 2`.
//!
//! For `α ≠ 1` only the last sign is free. For `p = 1` the conditions
//! specialize to `‖a_l‖² = 1/√L`, `a_l = b_{l+1}` and `q a_{L−1} = L^{1/4} w̄`.

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::outer;
use crate::ncf::{kkt_report, tangential, NcfProblem};
use crate::net::{homogeneity_order, Activation, Dataset, NetSpec, Weights};

/// Squared norm of the one-vector problem: `√(p^{L−1}/p̂)`, which is `1/√L`
/// for `p = 1`.
pub fn small_problem_radius(depth: usize, p: u32) -> f64 {
    if p == 1 {
        1.0 / (depth as f64).sqrt()
    } else {
        let p_hat = homogeneity_order(depth, p) as f64;
        ((p as f64).powi(depth as i32 - 1) / p_hat).sqrt()
    }
}

/// `max Σ_i y_i σ^{L−1}(x_iᵀu)` subject to `‖u‖² = radius_sq`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmallProblem {
    pub data: Dataset,
    pub activation: Activation,
    pub depth: usize,
    pub radius_sq: f64,
}

impl SmallProblem {
    pub fn new(data: Dataset, alpha: f64, p: u32, depth: usize) -> Self {
        Self {
            data,
            activation: Activation::new(alpha, p),
            depth,
            radius_sq: small_problem_radius(depth, p),
        }
    }

    pub fn for_spec(spec: &NetSpec, data: Dataset) -> Self {
        Self::new(data, spec.alpha, spec.p, spec.depth())
    }

    pub fn value(&self, u: ArrayView1<'_, f64>) -> f64 {
        let proj = self.data.x.t().dot(&u);
        let times = self.depth - 1;
        proj.iter()
            .zip(&self.data.y)
            .map(|(&t, &y)| y * self.activation.iterate(t, times))
            .sum()
    }

    pub fn gradient(&self, u: ArrayView1<'_, f64>) -> Array1<f64> {
        let proj = self.data.x.t().dot(&u);
        let times = self.depth - 1;
        let coeffs: Array1<f64> = proj
            .iter()
            .zip(&self.data.y)
            .map(|(&t, &y)| y * self.activation.iterate_derivative(t, times))
            .collect();
        self.data.x.dot(&coeffs)
    }

    /// Tangential residual and alignment at `u`, measured on its own sphere.
    pub fn kkt(&self, u: ArrayView1<'_, f64>) -> SmallKkt {
        let n = u.dot(&u).sqrt();
        let unit = u.mapv(|v| v / n);
        let g = self.gradient(u);
        let (lambda, residual, gnorm) = tangential(unit.as_slice().unwrap(), g.as_slice().unwrap());
        SmallKkt {
            value: self.value(u),
            residual,
            alignment: if gnorm > 0.0 { lambda / gnorm } else { 0.0 },
            norm_sq: n * n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmallKkt {
    pub value: f64,
    pub residual: f64,
    pub alignment: f64,
    pub norm_sq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmallPgaConfig {
    /// Step relative to the initial gradient norm.
    pub step: f64,
    pub max_iters: usize,
    /// Target for `residual/‖∇G‖`.
    pub tol: f64,
    pub max_attempts: usize,
}

impl Default for SmallPgaConfig {
    fn default() -> Self {
        Self {
            step: 0.5,
            max_iters: 200_000,
            tol: 1e-14,
            max_attempts: 20,
        }
    }
}

/// Projected gradient ascent on the sphere of radius `√radius_sq`, restarted
/// from fresh random directions until it ends at a KKT point with positive
/// value.
pub fn solve_small_problem(sp: &SmallProblem, seed: u64, cfg: &SmallPgaConfig) -> Result<(Array1<f64>, SmallKkt)> {
    let d = sp.data.dim();
    let radius = sp.radius_sq.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Array1<f64>, SmallKkt)> = None;
    for _attempt in 0..cfg.max_attempts {
        let mut v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.dot(&v).sqrt();
        v /= n;
        if sp.value((&v * radius).view()) <= 0.0 {
            v.mapv_inplace(|x| -x);
            if sp.value((&v * radius).view()) <= 0.0 {
                continue;
            }
        }
        if sp.activation.p == 1 {
            if let Some(u) = pattern_fixed_point(sp, v.clone(), cfg.max_iters.min(10_000)) {
                let report = sp.kkt(u.view());
                if report.value > 0.0 && report.residual <= 1e-8 {
                    return Ok((u, report));
                }
            }
            continue;
        }
        let g0 = sp.gradient((&v * radius).view());
        let g0n = g0.dot(&g0).sqrt();
        if g0n == 0.0 {
            continue;
        }
        let eta = cfg.step / (radius * g0n);
        let mut best_rel = f64::INFINITY;
        let mut stall = 0usize;
        for _ in 0..cfg.max_iters {
            let g = sp.gradient((&v * radius).view()) * radius;
            let (_, residual, gnorm) = tangential(v.as_slice().unwrap(), g.as_slice().unwrap());
            if gnorm == 0.0 {
                break;
            }
            let rel = residual / gnorm;
            if rel <= cfg.tol {
                break;
            }
            if rel < best_rel * (1.0 - 1e-3) {
                best_rel = rel;
                stall = 0;
            } else {
                stall += 1;
                // roundoff floor reached
                if stall > 2_000 {
                    break;
                }
            }
            v.scaled_add(eta, &g);
            let n = v.dot(&v).sqrt();
            v /= n;
        }
        let u = &v * radius;
        let report = sp.kkt(u.view());
        if report.value > 0.0 && report.residual <= 1e-8 {
            let better = best.as_ref().is_none_or(|(_, b)| report.residual < b.residual);
            if better {
                best = Some((u, report));
            }
            if report.residual <= 1e-12 {
                break;
            }
        }
    }
    best.ok_or(Error::NoPositiveKkt {
        attempts: cfg.max_attempts,
    })
}

/// For piecewise-linear σ the gradient is constant on each activation
/// pattern, so `u ← r∇G(u)/‖∇G(u)‖` lands on a KKT point as soon as the
/// pattern stops changing.
fn pattern_fixed_point(sp: &SmallProblem, mut v: Array1<f64>, max_iters: usize) -> Option<Array1<f64>> {
    let radius = sp.radius_sq.sqrt();
    let mut g = sp.gradient(v.view());
    for _ in 0..max_iters {
        let n = g.dot(&g).sqrt();
        if n == 0.0 {
            return None;
        }
        v = &g / n;
        let next = sp.gradient(v.view());
        if next == g {
            return Some(v * radius);
        }
        g = next;
    }
    None
}

/// Nonzero coordinates of one `a_l`, with optional signs (default positive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Support {
    pub indices: Vec<usize>,
    pub signs: Option<Vec<i8>>,
}

impl Support {
    pub fn single(index: usize) -> Self {
        Self {
            indices: vec![index],
            signs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOneKkt {
    pub a: Vec<Array1<f64>>,
    pub b: Vec<Array1<f64>>,
    pub w_bar: Array1<f64>,
    /// One sign per link `l → l+1`, the last one for `w̄`.
    pub q: Vec<i8>,
    pub p_hat: u64,
    pub alpha: f64,
    pub p: u32,
}

impl RankOneKkt {
    pub fn depth(&self) -> usize {
        self.a.len() + 1
    }

    fn uses_abs(&self) -> bool {
        self.alpha == 1.0 && self.p % 2 == 0
    }
}

fn vnorm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Builds the rank-one point determined by `b1`, the signs `q` and the
/// supports of `a_1, …, a_{L−1}` (default: every coordinate for `p = 1`,
/// coordinate 0 for `p ≥ 2`).
pub fn construct_rank_one(
    spec: &NetSpec,
    b1: &Array1<f64>,
    q: Option<&[i8]>,
    supports: Option<&[Support]>,
) -> Result<RankOneKkt> {
    spec.validate()?;
    let depth = spec.depth();
    let p = spec.p;
    let alpha = spec.alpha;
    let p_hat = spec.homogeneity_order();
    let radius_sq = small_problem_radius(depth, p);
    if b1.len() != spec.input_dim() {
        return Err(Error::Shape(format!("b1 has length {}, input dim is {}", b1.len(), spec.input_dim())));
    }
    let b1_sq = b1.dot(b1);
    if (b1_sq - radius_sq).abs() > 1e-10 {
        return Err(Error::Precondition(format!("‖b1‖² = {b1_sq}, required {radius_sq}")));
    }
    let q: Vec<i8> = match q {
        Some(q) => q.to_vec(),
        None => vec![1; depth - 1],
    };
    if q.len() != depth - 1 || q.iter().any(|&s| s != 1 && s != -1) {
        return Err(Error::Precondition(format!("need {} signs in {{-1, 1}}, got {q:?}", depth - 1)));
    }
    if alpha != 1.0 && q[..depth - 2].iter().any(|&s| s != 1) {
        return Err(Error::Precondition(
            "only the output sign is free when α ≠ 1 (hidden factors must be non-negative)".into(),
        ));
    }
    if let Some(s) = supports {
        if s.len() != depth - 1 {
            return Err(Error::Precondition(format!("need {} supports, got {}", depth - 1, s.len())));
        }
    }

    let pf = p as f64;
    let mut a = Vec::with_capacity(depth - 1);
    for l in 1..depth {
        let width = spec.widths[l];
        let target = (pf.powi((depth - l) as i32) / p_hat as f64).powf(0.25);
        let support = match supports {
            Some(s) => s[l - 1].clone(),
            None if p == 1 => Support {
                indices: (0..width).collect(),
                signs: None,
            },
            None => Support::single(0),
        };
        if support.indices.is_empty() || support.indices.iter().any(|&i| i >= width) {
            return Err(Error::Precondition(format!("bad support for a_{l}: {:?}", support.indices)));
        }
        let signs = support.signs.clone().unwrap_or_else(|| vec![1; support.indices.len()]);
        if signs.len() != support.indices.len() {
            return Err(Error::Precondition(format!("support signs for a_{l} do not match its indices")));
        }
        if alpha != 1.0 && signs.iter().any(|&s| s < 0) {
            return Err(Error::Precondition(format!("a_{l} must be non-negative when α ≠ 1")));
        }
        let entry = target / (support.indices.len() as f64).sqrt();
        let mut v = Array1::zeros(width);
        for (&i, &s) in support.indices.iter().zip(&signs) {
            v[i] = if s < 0 { -entry } else { entry };
        }
        a.push(v);
    }

    let take = |v: &Array1<f64>| if alpha == 1.0 && p % 2 == 0 { v.mapv(f64::abs) } else { v.clone() };
    let link = pf.powf(0.25);
    let mut b = Vec::with_capacity(depth - 1);
    b.push(b1.clone());
    for l in 1..depth - 1 {
        b.push(take(&a[l - 1]) * (q[l - 1] as f64 / link));
    }
    let w_bar = take(&a[depth - 2]) * (q[depth - 2] as f64 / (pf * p_hat as f64).powf(0.25));

    Ok(RankOneKkt {
        a,
        b,
        w_bar,
        q,
        p_hat,
        alpha,
        p,
    })
}

/// `(a_1 b_1ᵀ, …, a_{L−1} b_{L−1}ᵀ, w̄ᵀ)`.
pub fn assemble_weights(k: &RankOneKkt) -> Weights {
    let mut layers: Vec<Array2<f64>> = k.a.iter().zip(&k.b).map(|(a, b)| outer(a, b)).collect();
    layers.push(k.w_bar.clone().insert_axis(ndarray::Axis(0)));
    Weights::from_layers(&layers)
}

/// `‖diag(W_l W_lᵀ) − p·diag(W_{l+1}ᵀ W_{l+1})‖_∞` for each consecutive pair,
/// or the full-matrix gap `‖W_l W_lᵀ − W_{l+1}ᵀ W_{l+1}‖_max` when `σ(x) = x`.
pub fn check_balance(w: &Weights, alpha: f64, p: u32) -> Vec<f64> {
    let linear = alpha == 1.0 && p == 1;
    (0..w.depth() - 1)
        .map(|l| {
            let cur = w.layer(l);
            let next = w.layer(l + 1);
            let left = cur.dot(&cur.t());
            let right = next.t().dot(&next);
            if linear {
                (&left - &right).iter().fold(0.0f64, |m, v| m.max(v.abs()))
            } else {
                left.diag()
                    .iter()
                    .zip(right.diag())
                    .fold(0.0f64, |m, (x, y)| m.max((x - p as f64 * y).abs()))
            }
        })
        .collect()
}

pub fn max_balance_deviation(w: &Weights, alpha: f64, p: u32) -> f64 {
    check_balance(w, alpha, p).into_iter().fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub checks: Vec<ConditionCheck>,
    pub passed: bool,
}

impl Verdict {
    fn new(checks: Vec<ConditionCheck>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        Self { checks, passed }
    }

    pub fn failures(&self) -> impl Iterator<Item = &ConditionCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Tolerances used by [`verify_theorem_conditions`].
pub mod tolerance {
    pub const ALGEBRAIC: f64 = 1e-12;
    pub const SMALL_KKT: f64 = 1e-8;
    pub const FULL_KKT: f64 = 1e-8;
    pub const BALANCE: f64 = 1e-12;
    pub const SIGN: f64 = 1e-14;
}

fn check(name: &str, measured: f64, tol: f64) -> ConditionCheck {
    ConditionCheck {
        name: name.to_string(),
        measured,
        tolerance: tol,
        passed: measured <= tol,
    }
}

fn max_abs(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Spread of the nonzero entries of `v` (of their absolute values when
/// `absolute`), relative to the largest entry.
fn identical_entry_spread(v: &Array1<f64>, absolute: bool) -> f64 {
    let scale = max_abs(v);
    if scale == 0.0 {
        return 0.0;
    }
    let nz: Vec<f64> = v
        .iter()
        .filter(|x| x.abs() > 1e-8 * scale)
        .map(|&x| if absolute { x.abs() } else { x })
        .collect();
    let hi = nz.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = nz.iter().cloned().fold(f64::INFINITY, f64::min);
    (hi - lo) / scale
}

/// Itemized check of every norm, alignment, sign and optimality condition of
/// a rank-one point against the correlation problem `prob`.
pub fn verify_theorem_conditions(k: &RankOneKkt, prob: &NcfProblem) -> Result<Verdict> {
    use tolerance::*;
    let depth = k.depth();
    if prob.spec.depth() != depth || prob.spec.p != k.p || prob.spec.alpha != k.alpha {
        return Err(Error::Precondition("rank-one point does not match the problem's network".into()));
    }
    let p = k.p as f64;
    let p_hat = k.p_hat as f64;
    let mut checks = Vec::new();

    let norm_a = (1..depth)
        .map(|l| (vnorm(&k.a[l - 1]).powi(4) - p.powi((depth - l) as i32) / p_hat).abs())
        .fold(0.0, f64::max);
    checks.push(check("a_norms", norm_a, ALGEBRAIC));

    let equal = k
        .a
        .iter()
        .zip(&k.b)
        .map(|(a, b)| (vnorm(a) - vnorm(b)).abs())
        .fold(0.0, f64::max);
    checks.push(check("a_b_equal_norms", equal, ALGEBRAIC));

    checks.push(check(
        "w_bar_norm",
        (k.w_bar.dot(&k.w_bar) - 1.0 / p_hat).abs(),
        ALGEBRAIC,
    ));

    let take = |v: &Array1<f64>| if k.uses_abs() { v.mapv(f64::abs) } else { v.clone() };
    let mut align: f64 = 0.0;
    for l in 1..depth - 1 {
        let want = take(&k.a[l - 1]) * (k.q[l - 1] as f64 / p.powf(0.25));
        align = align.max(max_abs(&(&k.b[l] - &want)));
    }
    let want = take(&k.a[depth - 2]) * (k.q[depth - 2] as f64 / (p * p_hat).powf(0.25));
    align = align.max(max_abs(&(&k.w_bar - &want)));
    checks.push(check("alignment", align, ALGEBRAIC));

    if k.p >= 2 {
        let spread = k
            .a
            .iter()
            .map(|a| identical_entry_spread(a, k.alpha == 1.0))
            .fold(0.0, f64::max);
        checks.push(check("identical_entries", spread, ALGEBRAIC));
    }

    if k.alpha != 1.0 {
        let most_negative = k
            .a
            .iter()
            .chain(k.b.iter().skip(1))
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, &x| m.max(-x));
        checks.push(check("non_negative_factors", most_negative, SIGN));
    }

    let small = SmallProblem::new(prob.data.clone(), k.alpha, k.p, depth);
    let report = small.kkt(k.b[0].view());
    checks.push(check("b1_radius", (report.norm_sq - small.radius_sq).abs(), 1e-10));
    checks.push(check("b1_small_kkt_residual", report.residual, SMALL_KKT));
    checks.push(ConditionCheck {
        name: "b1_nonzero_value".into(),
        measured: report.value.abs(),
        tolerance: 0.0,
        passed: report.value != 0.0,
    });

    let w = assemble_weights(k);
    checks.push(check("unit_sphere", (w.flat().iter().map(|v| v * v).sum::<f64>() - 1.0).abs(), ALGEBRAIC));
    checks.push(check("balance", max_balance_deviation(&w, k.alpha, k.p), BALANCE));

    let full = kkt_report(prob, &w)?;
    checks.push(check("full_kkt_residual", full.residual, FULL_KKT));
    let order = prob.order() as f64;
    checks.push(check(
        "lagrange_multiplier",
        (full.lambda_estimate - order * full.ncf_value).abs() / (1.0 + full.lambda_estimate.abs()),
        FULL_KKT,
    ));

    Ok(Verdict::new(checks))
}

/// A fully built and verified point for `prob`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstructedKkt {
    pub kkt: RankOneKkt,
    pub small: SmallKkt,
    pub verdict: Verdict,
}

pub fn construct_and_verify(prob: &NcfProblem, seed: u64, q: Option<&[i8]>) -> Result<ConstructedKkt> {
    let sp = SmallProblem::for_spec(&prob.spec, prob.data.clone());
    let (b1, small) = solve_small_problem(&sp, seed, &SmallPgaConfig::default())?;
    let kkt = construct_rank_one(&prob.spec, &b1, q, None)?;
    let verdict = verify_theorem_conditions(&kkt, prob)?;
    Ok(ConstructedKkt { kkt, small, verdict })
}
