//! The neural correlation function `N(w) = zᵀH(X; w)` and first-order
//! optimality of its restriction to the unit sphere.
//!
//! On the sphere a nonzero `ŵ` is a KKT point exactly when `∇N(ŵ) = λŵ`, and
//! then `λ = M·N(ŵ)` by Euler's identity for an order-`M` homogeneous `N`. The
//! residual reported here is the tangential part of the gradient.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Trajectory;
use crate::net::{self, Dataset, NetSpec, Weights};

/// Default absolute tolerance on the tangential residual.
pub const KKT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NcfProblem {
    pub spec: NetSpec,
    pub data: Dataset,
    pub z: Array1<f64>,
}

impl NcfProblem {
    pub fn new(spec: NetSpec, data: Dataset, z: Array1<f64>) -> Result<Self> {
        spec.validate()?;
        if z.len() != data.n() {
            return Err(Error::Shape(format!(
                "weighting vector has length {}, dataset has {} examples",
                z.len(),
                data.n()
            )));
        }
        if data.dim() != spec.input_dim() {
            return Err(Error::Shape(format!(
                "data dimension {} does not match network input {}",
                data.dim(),
                spec.input_dim()
            )));
        }
        Ok(Self { spec, data, z })
    }

    /// The problem weighted by the dataset's own targets.
    pub fn from_targets(spec: NetSpec, data: Dataset) -> Result<Self> {
        let z = data.y.clone();
        Self::new(spec, data, z)
    }

    pub fn order(&self) -> u64 {
        self.spec.homogeneity_order()
    }

    pub fn value(&self, w: &Weights) -> Result<f64> {
        ncf_value(self, w)
    }

    pub fn gradient(&self, w: &Weights) -> Result<Weights> {
        ncf_gradient(self, w)
    }

    /// Value and gradient from one forward/backward pass.
    pub fn value_and_gradient(&self, w: &Weights) -> Result<(f64, Weights)> {
        let (g, out) = net::gradient_and_outputs(&self.spec, w, self.data.x.view(), self.z.view())?;
        Ok((self.z.dot(&out), g))
    }

    /// Gradient over a subset of examples, used by mini-batch ascent.
    pub fn batch_gradient(&self, w: &Weights, indices: &[usize]) -> Result<Weights> {
        let sub = self.data.select(indices);
        let z: Array1<f64> = indices.iter().map(|&i| self.z[i]).collect();
        net::gradient(&self.spec, w, &sub, z.view())
    }

    pub fn negated(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            data: self.data.clone(),
            z: -&self.z,
        }
    }
}

pub fn ncf_value(prob: &NcfProblem, w: &Weights) -> Result<f64> {
    let out = net::outputs(&prob.spec, w, prob.data.x.view())?;
    Ok(prob.z.dot(&out))
}

pub fn ncf_gradient(prob: &NcfProblem, w: &Weights) -> Result<Weights> {
    net::gradient(&prob.spec, w, &prob.data, prob.z.view())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub ncf_value: f64,
    /// `ŵᵀ∇N(ŵ)`
    pub lambda_estimate: f64,
    /// `‖∇N(ŵ) − λ̂ŵ‖₂`
    pub residual: f64,
    /// `ŵᵀ∇N(ŵ)/‖∇N(ŵ)‖₂`, or 0 when the gradient vanishes.
    pub alignment: f64,
    pub gradient_norm: f64,
    pub is_nonnegative_kkt: bool,
    /// Set for `p = 1` activations with a kink, where the gradient is a
    /// selection from the Clarke subdifferential.
    pub nonsmooth: bool,
}

impl KktReport {
    pub fn is_kkt(&self, tol: f64) -> bool {
        self.residual <= tol
    }
}

/// Radial/tangential split of `g` at the unit vector `u`.
pub(crate) fn tangential(u: &[f64], g: &[f64]) -> (f64, f64, f64) {
    let lambda: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
    let residual = u
        .iter()
        .zip(g)
        .map(|(a, b)| (b - lambda * a).powi(2))
        .sum::<f64>()
        .sqrt();
    let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    (lambda, residual, gnorm)
}

pub(crate) fn cosine(u: &[f64], g: &[f64]) -> Option<f64> {
    let un = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if un == 0.0 || gn == 0.0 {
        return None;
    }
    let dot: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
    Some((dot / (un * gn)).clamp(-1.0, 1.0))
}

pub fn kkt_report(prob: &NcfProblem, w: &Weights) -> Result<KktReport> {
    kkt_report_with_tol(prob, w, KKT_TOL)
}

pub fn kkt_report_with_tol(prob: &NcfProblem, w: &Weights, tol: f64) -> Result<KktReport> {
    let norm = w.norm();
    if norm == 0.0 {
        return Err(Error::ZeroInput("KKT report needs nonzero weights".into()));
    }
    let unit = w.scaled(1.0 / norm);
    let (value, grad) = prob.value_and_gradient(&unit)?;
    let (lambda, residual, gnorm) = tangential(unit.flat(), grad.flat());
    let alignment = if gnorm == 0.0 {
        0.0
    } else {
        (lambda / gnorm).clamp(-1.0, 1.0)
    };
    Ok(KktReport {
        ncf_value: value,
        lambda_estimate: lambda,
        residual,
        alignment,
        gradient_norm: gnorm,
        is_nonnegative_kkt: residual <= tol && value >= -tol,
        nonsmooth: prob.spec.activation().is_nonsmooth(),
    })
}

/// Alignment of `w̃ = w/‖w‖` with `∇N(w̃)` at every snapshot; `None` marks a
/// zero snapshot or a vanishing gradient.
pub fn directional_alignment_series(prob: &NcfProblem, traj: &Trajectory) -> Result<Vec<Option<f64>>> {
    traj.states
        .iter()
        .map(|state| {
            let w = Weights::from_flat(&prob.spec, state.clone())?;
            alignment_at(prob, &w)
        })
        .collect()
}

pub fn alignment_at(prob: &NcfProblem, w: &Weights) -> Result<Option<f64>> {
    let norm = w.norm();
    if norm == 0.0 {
        return Ok(None);
    }
    let unit = w.scaled(1.0 / norm);
    let g = prob.gradient(&unit)?;
    Ok(cosine(unit.flat(), g.flat()))
}

/// `Σ_i z_i H(x_i; w)` for an arbitrary weighting, without building a problem.
pub fn correlation(spec: &NetSpec, w: &Weights, data: &Dataset, z: ArrayView1<'_, f64>) -> Result<f64> {
    let out = net::outputs(spec, w, data.x.view())?;
    Ok(z.dot(&out))
}
