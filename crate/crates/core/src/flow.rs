//! Integrators for the training gradient flow and the correlation ascent flow,
//! plus their discrete counterparts.
//!
//! Continuous flows use fixed-step classical RK4. Ascent flows of an order-`M`
//! homogeneous correlation escape to infinity in finite time when they start
//! with a positive value; the integrator stops at a norm cap and estimates the
//! escape time from the times at which the norm doubles.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::debug;
use ndarray::{Array1, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{loss_prime, LossKind};
use crate::ncf::{cosine, NcfProblem};
use crate::net::{self, Dataset, NetSpec, Weights};

/// Snapshots needed below `zero_floor` before declaring convergence to zero.
pub const ZERO_RUN: usize = 100;

/// Largest relative change of the state per step when step shrinking is on.
const MAX_RELATIVE_CHANGE: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    Horizon,
    BlowUp { t_star_estimate: f64 },
    ConvergedToZero,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub terminated_by: Termination,
    /// The vector field used a kink selection (`p = 1`, `α ≠ 1`).
    pub nonsmooth: bool,
}

impl Trajectory {
    fn start(x0: Vec<f64>, nonsmooth: bool) -> Self {
        Self {
            times: vec![0.0],
            states: vec![x0],
            terminated_by: Termination::Horizon,
            nonsmooth,
        }
    }

    fn push(&mut self, t: f64, x: &[f64]) {
        if self.times.last().is_some_and(|&last| last >= t) {
            return;
        }
        self.times.push(t);
        self.states.push(x.to_vec());
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory always holds its initial state")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn norms(&self) -> Vec<f64> {
        self.states.iter().map(|s| l2(s)).collect()
    }

    pub fn final_weights(&self, spec: &NetSpec) -> Result<Weights> {
        Weights::from_flat(spec, self.final_state().to_vec())
    }

    /// CSV with header `t,w_0,…,w_{k-1}`, one row per snapshot.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let k = self.states.first().map_or(0, |s| s.len());
        write!(out, "t")?;
        for j in 0..k {
            write!(out, ",w_{j}")?;
        }
        writeln!(out)?;
        for (t, s) in self.times.iter().zip(&self.states) {
            write!(out, "{t:e}")?;
            for v in s {
                write!(out, ",{v:e}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn sidecar(&self, spec: &NetSpec, delta: f64, seed: Option<u64>) -> TrajectorySidecar {
        TrajectorySidecar {
            spec: spec.clone(),
            delta,
            seed,
            terminated_by: self.terminated_by,
            nonsmooth: self.nonsmooth,
            snapshots: self.len(),
        }
    }
}

/// JSON metadata written next to a trajectory CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectorySidecar {
    pub spec: NetSpec,
    pub delta: f64,
    pub seed: Option<u64>,
    pub terminated_by: Termination,
    pub nonsmooth: bool,
    pub snapshots: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub step: f64,
    pub horizon: f64,
    pub snapshot_stride: usize,
    pub blowup_norm_cap: f64,
    pub zero_floor: f64,
    /// Limit the relative change per step to 1% once the field is fast
    /// compared with `step`; needed to resolve finite-time escape.
    pub step_shrink_near_blowup: bool,
}

impl IntegratorConfig {
    pub fn new(step: f64, horizon: f64) -> Self {
        Self {
            step,
            horizon,
            snapshot_stride: 1,
            blowup_norm_cap: 1e8,
            zero_floor: 1e-12,
            step_shrink_near_blowup: false,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.snapshot_stride = stride;
        self
    }

    pub fn with_shrink(mut self, on: bool) -> Self {
        self.step_shrink_near_blowup = on;
        self
    }

    pub fn with_cap(mut self, cap: f64) -> Self {
        self.blowup_norm_cap = cap;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.horizon > 0.0 && self.blowup_norm_cap > 0.0 && self.zero_floor > 0.0)
            || self.snapshot_stride == 0
        {
            return Err(Error::Precondition(format!("integrator settings must be positive: {self:?}")));
        }
        Ok(())
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(xi, di)| xi + a * di).collect()
}

/// Escape-time estimate from the last three norm-doubling times. For a power
/// law `(T* − t)^{−β}` the gaps between doublings are geometric, so Aitken
/// extrapolation of the gaps is exact.
fn escape_time(doublings: &[f64], fallback: f64) -> f64 {
    if doublings.len() < 3 {
        return fallback;
    }
    let k = doublings.len();
    let d1 = doublings[k - 2] - doublings[k - 3];
    let d2 = doublings[k - 1] - doublings[k - 2];
    if d1 > d2 && d2 > 0.0 {
        (doublings[k - 1] + d2 * d2 / (d1 - d2)).max(fallback)
    } else {
        fallback
    }
}

/// Classical RK4 on `ẋ = field(x)` from `x0`.
pub fn integrate_rk4<F>(x0: &[f64], cfg: &IntegratorConfig, nonsmooth: bool, mut field: F) -> Result<Trajectory>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let mut traj = Trajectory::start(x0.to_vec(), nonsmooth);
    let mut x = x0.to_vec();
    let mut t = 0.0;
    let initial_norm = l2(&x);
    let mut next_level = 2.0 * initial_norm;
    let mut doublings: Vec<f64> = Vec::new();
    let mut prev_norm = initial_norm;
    let mut zero_run = 0usize;
    let mut steps = 0usize;
    let end_tol = 1e-12 * cfg.horizon;

    while cfg.horizon - t > end_tol {
        let k1 = field(&x)?;
        let mut h = cfg.step.min(cfg.horizon - t);
        if cfg.step_shrink_near_blowup {
            let speed = l2(&k1);
            let size = l2(&x);
            if speed > 0.0 && size > 0.0 {
                h = h.min(MAX_RELATIVE_CHANGE * size / speed);
            }
        }
        let k2 = field(&axpy(&x, 0.5 * h, &k1))?;
        let k3 = field(&axpy(&x, 0.5 * h, &k2))?;
        let k4 = field(&axpy(&x, h, &k3))?;
        let next: Vec<f64> = (0..x.len())
            .map(|j| x[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]))
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            traj.push(t, &x);
            traj.terminated_by = Termination::BlowUp {
                t_star_estimate: escape_time(&doublings, t),
            };
            return Ok(traj);
        }
        let t_next = t + h;
        let norm = l2(&next);
        while initial_norm > 0.0 && norm >= next_level {
            // Crossing time by interpolation in log-norm across the step.
            let frac = if norm > prev_norm {
                ((next_level.ln() - prev_norm.ln()) / (norm.ln() - prev_norm.ln())).clamp(0.0, 1.0)
            } else {
                1.0
            };
            doublings.push(t + frac * h);
            next_level *= 2.0;
        }
        x = next;
        t = t_next;
        prev_norm = norm;
        steps += 1;

        if norm > cfg.blowup_norm_cap {
            traj.push(t, &x);
            traj.terminated_by = Termination::BlowUp {
                t_star_estimate: escape_time(&doublings, t),
            };
            debug!("blow-up at t={t} after {steps} steps");
            return Ok(traj);
        }
        if steps % cfg.snapshot_stride == 0 {
            traj.push(t, &x);
            if norm < cfg.zero_floor {
                zero_run += 1;
                if zero_run >= ZERO_RUN {
                    traj.terminated_by = Termination::ConvergedToZero;
                    return Ok(traj);
                }
            } else {
                zero_run = 0;
            }
        }
    }
    traj.push(t, &x);
    Ok(traj)
}

fn check_unit(w0: &Weights) -> Result<()> {
    let n = w0.norm();
    if (n - 1.0).abs() > 1e-12 {
        return Err(Error::Precondition(format!("initial direction must have unit norm, got {n}")));
    }
    Ok(())
}

/// `−∇L(w)` for `L(w) = Σ_i ℓ(H(x_i; w), y_i)`.
pub fn training_field(spec: &NetSpec, data: &Dataset, kind: LossKind, w: &Weights) -> Result<(Weights, Array1<f64>)> {
    let out = net::outputs(spec, w, data.x.view())?;
    let coeffs: Array1<f64> = out.iter().zip(&data.y).map(|(&o, &y)| -loss_prime(kind, o, y)).collect();
    let g = net::gradient(spec, w, data, coeffs.view())?;
    Ok((g, out))
}

/// RK4 trajectory of `ẇ = −∇L(w)` from `δ·w0`.
pub fn integrate_training_flow(
    spec: &NetSpec,
    w0: &Weights,
    delta: f64,
    data: &Dataset,
    kind: LossKind,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    w0.check(spec)?;
    check_unit(w0)?;
    if delta <= 0.0 {
        return Err(Error::Precondition(format!("initial scale must be positive, got {delta}")));
    }
    let start = w0.scaled(delta);
    integrate_rk4(start.flat(), cfg, spec.activation().is_nonsmooth(), |state| {
        let w = Weights::from_flat(spec, state.to_vec())?;
        Ok(training_field(spec, data, kind, &w)?.0.into_flat())
    })
}

/// RK4 trajectory of the ascent flow `u̇ = ∇N_z(u)` from `u0`.
pub fn integrate_ncf_flow(
    spec: &NetSpec,
    u0: &Weights,
    z: ArrayView1<'_, f64>,
    data: &Dataset,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    u0.check(spec)?;
    if z.len() != data.n() {
        return Err(Error::Shape(format!("weighting has length {}, data has {}", z.len(), data.n())));
    }
    integrate_rk4(u0.flat(), cfg, spec.activation().is_nonsmooth(), |state| {
        let w = Weights::from_flat(spec, state.to_vec())?;
        Ok(net::gradient(spec, &w, data, z)?.into_flat())
    })
}

/// Power-law fit of the norm near the escape time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlowupReport {
    pub t_star_estimate: f64,
    /// Slope of `log‖u‖` against `−log(T* − t)`; tends to `1/(M − 2)`.
    pub fitted_exponent: f64,
    /// `κ` in `‖u‖ ≈ κ (T* − t)^{−β}`.
    pub kappa_rate: f64,
    pub r_squared: f64,
    pub expected_exponent: f64,
    pub samples: usize,
}

pub const MIN_FIT_SAMPLES: usize = 8;

pub fn fit_blowup_rate(traj: &Trajectory, order: u64) -> Result<BlowupReport> {
    let t_star = match traj.terminated_by {
        Termination::BlowUp { t_star_estimate } => t_star_estimate,
        other => {
            return Err(Error::Precondition(format!("trajectory did not blow up: {other:?}")));
        }
    };
    if order < 3 {
        return Err(Error::Precondition(format!("finite-time escape needs order ≥ 3, got {order}")));
    }
    let initial = l2(&traj.states[0]);
    let (xs, ys): (Vec<f64>, Vec<f64>) = traj
        .times
        .iter()
        .zip(&traj.states)
        .filter_map(|(&t, s)| {
            let n = l2(s);
            (n > 10.0 * initial && t < t_star).then(|| (-(t_star - t).ln(), n.ln()))
        })
        .unzip();
    if xs.len() < MIN_FIT_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_FIT_SAMPLES,
            found: xs.len(),
        });
    }
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok(BlowupReport {
        t_star_estimate: t_star,
        fitted_exponent: slope,
        kappa_rate: intercept.exp(),
        r_squared,
        expected_exponent: 1.0 / (order as f64 - 2.0),
        samples: xs.len(),
    })
}

/// `s(t) = w(t/δ^{M−2})/δ`: times are multiplied by `δ^{M−2}` and states
/// divided by `δ`.
pub fn rescale_trajectory(traj: &Trajectory, delta: f64, order: u64) -> Result<Trajectory> {
    if delta <= 0.0 {
        return Err(Error::Precondition(format!("scale must be positive, got {delta}")));
    }
    let time_scale = delta.powi(order as i32 - 2);
    let terminated_by = match traj.terminated_by {
        Termination::BlowUp { t_star_estimate } => Termination::BlowUp {
            t_star_estimate: t_star_estimate * time_scale,
        },
        other => other,
    };
    Ok(Trajectory {
        times: traj.times.iter().map(|t| t * time_scale).collect(),
        states: traj
            .states
            .iter()
            .map(|s| s.iter().map(|v| v / delta).collect())
            .collect(),
        terminated_by,
        nonsmooth: traj.nonsmooth,
    })
}

/// `ℓ'(H(X; w), y) − ℓ'(0, y)`.
pub fn xi_residual(spec: &NetSpec, w: &Weights, data: &Dataset, kind: LossKind) -> Result<Array1<f64>> {
    let out = net::outputs(spec, w, data.x.view())?;
    Ok(out
        .iter()
        .zip(&data.y)
        .map(|(&o, &y)| loss_prime(kind, o, y) - loss_prime(kind, 0.0, y))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GdConfig {
    pub step: f64,
    pub iters: usize,
    pub stride: usize,
}

/// Explicit Euler on `−∇L` from `δ·w0`; times are iteration counts.
pub fn gradient_descent(
    spec: &NetSpec,
    w0: &Weights,
    delta: f64,
    cfg: &GdConfig,
    data: &Dataset,
    kind: LossKind,
) -> Result<Trajectory> {
    w0.check(spec)?;
    if !(cfg.step > 0.0) || cfg.stride == 0 {
        return Err(Error::Precondition(format!("bad descent settings {cfg:?}")));
    }
    let mut w = w0.scaled(delta);
    let mut traj = Trajectory::start(w.flat().to_vec(), spec.activation().is_nonsmooth());
    for it in 1..=cfg.iters {
        let (g, _) = training_field(spec, data, kind, &w)?;
        for (wi, gi) in w.flat_mut().iter_mut().zip(g.flat()) {
            *wi += cfg.step * gi;
        }
        if w.flat().iter().any(|v| !v.is_finite()) {
            traj.terminated_by = Termination::BlowUp {
                t_star_estimate: it as f64,
            };
            return Ok(traj);
        }
        if it % cfg.stride == 0 || it == cfg.iters {
            traj.push(it as f64, w.flat());
        }
    }
    Ok(traj)
}

/// Mini-batch phase run before full-batch projected ascent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiniBatch {
    pub size: usize,
    pub iters: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgaConfig {
    pub step: f64,
    pub max_iters: usize,
    pub stride: usize,
    /// Stop once `ŵᵀ∇N(ŵ)/‖∇N(ŵ)‖ ≥ stop_alignment`.
    pub stop_alignment: Option<f64>,
    pub minibatch: Option<MiniBatch>,
}

impl PgaConfig {
    pub fn fixed(step: f64, iters: usize) -> Self {
        Self {
            step,
            max_iters: iters,
            stride: 1,
            stop_alignment: None,
            minibatch: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PgaRun {
    pub trajectory: Trajectory,
    /// `c_t = 1/‖v(t) + η∇N(v(t))‖` for every full-batch step taken.
    pub scale_factors: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_alignment: Option<f64>,
}

/// `v(t+1) = (v(t) + η∇N(v(t))) / ‖v(t) + η∇N(v(t))‖`.
pub fn projected_gradient_ascent(prob: &NcfProblem, u0: &Weights, cfg: &PgaConfig) -> Result<PgaRun> {
    u0.check(&prob.spec)?;
    check_unit(u0)?;
    if !(cfg.step > 0.0) || cfg.stride == 0 {
        return Err(Error::Precondition(format!("bad ascent settings {cfg:?}")));
    }
    let nonsmooth = prob.spec.activation().is_nonsmooth();
    let mut v = u0.clone();
    let mut traj = Trajectory::start(v.flat().to_vec(), nonsmooth);
    let mut scale_factors = Vec::new();
    let mut it = 0usize;

    if let Some(mb) = cfg.minibatch {
        let n = prob.data.n();
        let size = mb.size.clamp(1, n);
        let mut rng = ChaCha8Rng::seed_from_u64(mb.seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n;
        for _ in 0..mb.iters.min(cfg.max_iters) {
            if cursor + size > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let batch = &order[cursor..cursor + size];
            cursor += size;
            let g = prob.batch_gradient(&v, batch)?;
            step_on_sphere(&mut v, &g, cfg.step);
            it += 1;
            if it % cfg.stride == 0 {
                traj.push(it as f64, v.flat());
            }
        }
    }

    let mut converged = false;
    let mut final_alignment = None;
    while it < cfg.max_iters {
        let g = prob.gradient(&v)?;
        let align = cosine(v.flat(), g.flat());
        final_alignment = align;
        let Some(align) = align else {
            traj.push(it as f64, v.flat());
            traj.terminated_by = Termination::ConvergedToZero;
            return Ok(PgaRun {
                trajectory: traj,
                scale_factors,
                iterations: it,
                converged: false,
                final_alignment,
            });
        };
        if cfg.stop_alignment.is_some_and(|target| align >= target) {
            converged = true;
            break;
        }
        let c = step_on_sphere(&mut v, &g, cfg.step);
        scale_factors.push(c);
        it += 1;
        if it % cfg.stride == 0 {
            traj.push(it as f64, v.flat());
        }
    }
    if cfg.stop_alignment.is_none() {
        let g = prob.gradient(&v)?;
        final_alignment = cosine(v.flat(), g.flat());
    }
    traj.push(it as f64, v.flat());
    Ok(PgaRun {
        trajectory: traj,
        scale_factors,
        iterations: it,
        converged,
        final_alignment,
    })
}

fn step_on_sphere(v: &mut Weights, g: &Weights, step: f64) -> f64 {
    for (vi, gi) in v.flat_mut().iter_mut().zip(g.flat()) {
        *vi += step * gi;
    }
    let c = 1.0 / v.norm();
    for vi in v.flat_mut() {
        *vi *= c;
    }
    c
}

/// `u(t+1) = u(t) + η_t∇N(u(t))` with `η_t = η (Π_{m<t} c_m)^{M−2}`, using
/// the scale factors recorded by a paired projected run.
pub fn adaptive_gradient_ascent(
    prob: &NcfProblem,
    u0: &Weights,
    base_step: f64,
    scale_factors: &[f64],
) -> Result<Trajectory> {
    u0.check(&prob.spec)?;
    if !(base_step > 0.0) {
        return Err(Error::Precondition(format!("step must be positive, got {base_step}")));
    }
    let power = prob.order() as i32 - 2;
    let mut u = u0.clone();
    let mut traj = Trajectory::start(u.flat().to_vec(), prob.spec.activation().is_nonsmooth());
    let mut product: f64 = 1.0;
    for (t, &c) in scale_factors.iter().enumerate() {
        let eta = base_step * product.powi(power);
        let g = prob.gradient(&u)?;
        for (ui, gi) in u.flat_mut().iter_mut().zip(g.flat()) {
            *ui += eta * gi;
        }
        product *= c;
        traj.push((t + 1) as f64, u.flat());
    }
    Ok(traj)
}

/// Largest relative gap `‖v(t) − (Π_{m<t} c_m) u(t)‖/‖v(t)‖` along paired
/// projected and adaptive runs.
pub fn projection_identity_deviation(pga: &PgaRun, adaptive: &Trajectory) -> f64 {
    let mut product = 1.0;
    let mut worst: f64 = 0.0;
    let v_states = &pga.trajectory.states;
    for t in 0..adaptive.states.len().min(v_states.len()) {
        if t > 0 {
            product *= pga.scale_factors[t - 1];
        }
        let v = &v_states[t];
        let u = &adaptive.states[t];
        let diff: f64 = v.iter().zip(u).map(|(a, b)| (a - product * b).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(diff / l2(v));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn scalar_chain(depth: usize) -> (NetSpec, Dataset) {
        let spec = NetSpec::new(vec![1; depth + 1], 1.0, 1).unwrap();
        let data = Dataset::new(array![[1.0]], array![1.0]).unwrap();
        (spec, data)
    }

    #[test]
    fn zero_weighting_keeps_state() {
        let (spec, data) = scalar_chain(3);
        let u0 = Weights::from_flat(&spec, vec![0.3, -0.2, 0.5]).unwrap();
        let cfg = IntegratorConfig::new(0.01, 1.0);
        let traj = integrate_ncf_flow(&spec, &u0, array![0.0].view(), &data, &cfg).unwrap();
        assert!(traj.states.iter().all(|s| s == u0.flat()));
        assert_eq!(traj.terminated_by, Termination::Horizon);
        assert_relative_eq!(traj.final_time(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn balanced_chain_follows_closed_form() {
        // u̇ = u² per coordinate: u(t) = c/(1 − ct).
        let (spec, data) = scalar_chain(3);
        let c = 0.5;
        let u0 = Weights::from_flat(&spec, vec![c; 3]).unwrap();
        let cfg = IntegratorConfig::new(1e-3, 1.0);
        let traj = integrate_ncf_flow(&spec, &u0, data.y.view(), &data, &cfg).unwrap();
        let expected = c / (1.0 - c * 1.0);
        for v in traj.final_state() {
            assert_relative_eq!(*v, expected, max_relative = 1e-10);
        }
    }

    #[test]
    fn blowup_detected_with_escape_estimate() {
        let (spec, data) = scalar_chain(3);
        let c = 0.5;
        let u0 = Weights::from_flat(&spec, vec![c; 3]).unwrap();
        let cfg = IntegratorConfig::new(1e-2, 10.0).with_shrink(true);
        let traj = integrate_ncf_flow(&spec, &u0, data.y.view(), &data, &cfg).unwrap();
        match traj.terminated_by {
            Termination::BlowUp { t_star_estimate } => assert_relative_eq!(t_star_estimate, 2.0, max_relative = 1e-6),
            other => panic!("expected blow-up, got {other:?}"),
        }
        let times_increase = traj.times.windows(2).all(|w| w[1] > w[0]);
        assert!(times_increase);
    }

    #[test]
    fn converged_to_zero_after_run_of_small_snapshots() {
        let traj = integrate_rk4(&[1.0], &IntegratorConfig::new(0.1, 1e6), false, |x| Ok(vec![-x[0]])).unwrap();
        assert_eq!(traj.terminated_by, Termination::ConvergedToZero);
        let tail = &traj.states[traj.len() - ZERO_RUN..];
        assert!(tail.iter().all(|s| s[0].abs() < 1e-12));
    }

    #[test]
    fn fit_requires_blowup_and_samples() {
        let (spec, data) = scalar_chain(3);
        let u0 = Weights::from_flat(&spec, vec![0.5; 3]).unwrap();
        let traj = integrate_ncf_flow(&spec, &u0, data.y.view(), &data, &IntegratorConfig::new(1e-2, 0.5)).unwrap();
        assert!(fit_blowup_rate(&traj, 3).is_err());

        let coarse = IntegratorConfig::new(1e-2, 10.0).with_shrink(true).with_stride(100_000);
        let traj = integrate_ncf_flow(&spec, &u0, data.y.view(), &data, &coarse).unwrap();
        assert!(matches!(fit_blowup_rate(&traj, 3), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn rescale_identity_and_origin() {
        let traj = Trajectory {
            times: vec![0.0, 1.0, 2.0],
            states: vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]],
            terminated_by: Termination::Horizon,
            nonsmooth: false,
        };
        let same = rescale_trajectory(&traj, 1.0, 3).unwrap();
        assert_eq!(same.times, traj.times);
        assert_eq!(same.states, traj.states);
        let s = rescale_trajectory(&traj, 0.1, 4).unwrap();
        assert_relative_eq!(s.states[0][0], 1.0, max_relative = 1e-15);
        assert_relative_eq!(s.times[2], 2.0 * 0.01, max_relative = 1e-15);
        assert!(rescale_trajectory(&traj, 0.0, 3).is_err());
    }

    #[test]
    fn xi_residual_square_loss_is_output() {
        let spec = NetSpec::new(vec![2, 3, 1], 0.0, 2).unwrap();
        let data = Dataset::new(array![[0.3, -1.0], [0.8, 0.2]], array![1.0, 2.0]).unwrap();
        let w = Weights::from_flat(&spec, vec![0.5, -0.2, -0.3, 0.9, 0.4, 0.1, 0.7, -0.3, 1.1]).unwrap();
        let xi = xi_residual(&spec, &w, &data, LossKind::Square).unwrap();
        let out = net::outputs(&spec, &w, data.x.view()).unwrap();
        for (a, b) in xi.iter().zip(&out) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12);
        }
        let zero = xi_residual(&spec, &Weights::zeros(&spec), &data, LossKind::Logistic).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gd_zero_iterations() {
        let (spec, data) = scalar_chain(2);
        let w0 = Weights::from_flat(&spec, vec![0.6, 0.8]).unwrap();
        let cfg = GdConfig {
            step: 0.1,
            iters: 0,
            stride: 1,
        };
        let traj = gradient_descent(&spec, &w0, 0.5, &cfg, &data, LossKind::Square).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.states[0], vec![0.3, 0.4]);
    }

    #[test]
    fn training_flow_preconditions() {
        let (spec, data) = scalar_chain(2);
        let w0 = Weights::from_flat(&spec, vec![0.6, 0.9]).unwrap();
        let cfg = IntegratorConfig::new(0.1, 1.0);
        assert!(integrate_training_flow(&spec, &w0, 0.1, &data, LossKind::Square, &cfg).is_err());
        let w0 = Weights::from_flat(&spec, vec![0.6, 0.8]).unwrap();
        assert!(integrate_training_flow(&spec, &w0, 0.0, &data, LossKind::Square, &cfg).is_err());
        assert!(integrate_training_flow(&spec, &w0, 0.1, &data, LossKind::Square, &cfg).is_ok());
    }

    #[test]
    fn adaptive_with_unit_scales_is_plain_ascent() {
        let (spec, data) = scalar_chain(3);
        let prob = NcfProblem::from_targets(spec.clone(), data).unwrap();
        let u0 = Weights::from_flat(&spec, vec![0.3, 0.4, 0.5]).unwrap();
        let traj = adaptive_gradient_ascent(&prob, &u0, 0.1, &[1.0, 1.0, 1.0]).unwrap();
        let mut u = u0.clone();
        for _ in 0..3 {
            let g = prob.gradient(&u).unwrap();
            for (a, b) in u.flat_mut().iter_mut().zip(g.flat()) {
                *a += 0.1 * b;
            }
        }
        assert_eq!(traj.final_state(), u.flat());
    }

    #[test]
    fn trajectory_csv_header() {
        let traj = Trajectory {
            times: vec![0.0, 0.5],
            states: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            terminated_by: Termination::Horizon,
            nonsmooth: false,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        traj.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,w_0,w_1");
        assert_eq!(lines.count(), 2);
    }
}
