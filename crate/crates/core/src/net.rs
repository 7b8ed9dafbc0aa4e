//! Bias-free feed-forward networks with the activation `max(x, αx)^p`.
//!
//! A network of depth `L` maps `x ∈ R^d` to `W_L σ(W_{L-1} ⋯ σ(W_1 x) ⋯)`. With
//! every layer trainable the output is positively homogeneous in the weights of
//! order `p^{L-1} + ⋯ + p + 1`.
//!
//! Weights are stored as one flat buffer, layer-major and row-major within a
//! layer, so the flat vector used by the integrators and the per-layer matrices
//! are two views of the same data.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activation `σ(x) = max(x, αx)^p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub alpha: f64,
    pub p: u32,
}

impl Activation {
    pub fn new(alpha: f64, p: u32) -> Self {
        Self { alpha, p }
    }

    /// Slope of the active branch of `max(x, αx)`. At the kink the leak slope
    /// `α` is selected.
    #[inline]
    fn branch(&self, x: f64) -> (f64, f64) {
        let leaked = self.alpha * x;
        if leaked > x || x == 0.0 {
            (leaked, self.alpha)
        } else {
            (x, 1.0)
        }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let (m, _) = self.branch(x);
        m.powi(self.p as i32)
    }

    /// Derivative with the kink selection: `α` at `x = 0` when `p = 1`, and `0`
    /// there when `p ≥ 2` where the function is differentiable.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        let (m, slope) = self.branch(x);
        self.p as f64 * m.powi(self.p as i32 - 1) * slope
    }

    /// `σ` composed with itself `times` times; `times = 0` is the identity.
    pub fn iterate(&self, x: f64, times: usize) -> f64 {
        (0..times).fold(x, |acc, _| self.eval(acc))
    }

    /// Derivative of the `times`-fold composition, by the chain rule along the
    /// same selection as [`Activation::derivative`].
    pub fn iterate_derivative(&self, x: f64, times: usize) -> f64 {
        let mut value = x;
        let mut slope = 1.0;
        for _ in 0..times {
            slope *= self.derivative(value);
            value = self.eval(value);
        }
        slope
    }

    /// True when `σ(x) = x`.
    pub fn is_linear(&self) -> bool {
        self.p == 1 && self.alpha == 1.0
    }

    /// `p = 1` with a genuine kink; gradients there are a selection.
    pub fn is_nonsmooth(&self) -> bool {
        self.p == 1 && self.alpha != 1.0
    }
}

pub fn activation(x: f64, alpha: f64, p: u32) -> f64 {
    Activation::new(alpha, p).eval(x)
}

pub fn activation_derivative(x: f64, alpha: f64, p: u32) -> f64 {
    Activation::new(alpha, p).derivative(x)
}

pub fn iterated_activation(x: f64, alpha: f64, p: u32, times: usize) -> f64 {
    Activation::new(alpha, p).iterate(x, times)
}

/// Architecture: widths `k_0 = d, k_1, …, k_L = 1` and the activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub widths: Vec<usize>,
    pub alpha: f64,
    pub p: u32,
}

impl NetSpec {
    pub fn new(widths: Vec<usize>, alpha: f64, p: u32) -> Result<Self> {
        let spec = Self { widths, alpha, p };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::InvalidSpec(format!(
                "depth must be at least 2, got {}",
                self.widths.len().saturating_sub(1)
            )));
        }
        if *self.widths.last().unwrap() != 1 {
            return Err(Error::InvalidSpec("output width must be 1".into()));
        }
        if self.widths.iter().any(|&k| k == 0) {
            return Err(Error::InvalidSpec("all widths must be positive".into()));
        }
        if self.p == 0 {
            return Err(Error::InvalidSpec("activation power must be at least 1".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::InvalidSpec("alpha must be finite".into()));
        }
        Ok(())
    }

    /// Network with input dimension `d` and the given hidden widths.
    pub fn with_hidden(d: usize, hidden: &[usize], alpha: f64, p: u32) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(d);
        widths.extend_from_slice(hidden);
        widths.push(1);
        Self::new(widths, alpha, p)
    }

    pub fn activation(&self) -> Activation {
        Activation::new(self.alpha, self.p)
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    /// Shape `(k_l, k_{l-1})` of layer `l` (zero-based index `l - 1`).
    pub fn layer_shape(&self, index: usize) -> (usize, usize) {
        (self.widths[index + 1], self.widths[index])
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        (0..self.depth()).map(|i| self.layer_shape(i)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c).sum()
    }

    pub fn homogeneity_order(&self) -> u64 {
        homogeneity_order(self.depth(), self.p)
    }
}

/// `Σ_{l=0}^{L-1} p^l`.
pub fn homogeneity_order(depth: usize, p: u32) -> u64 {
    (0..depth).map(|l| (p as u64).pow(l as u32)).sum()
}

/// Weights of every layer in one flat buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    shapes: Vec<(usize, usize)>,
    data: Vec<f64>,
}

impl Weights {
    pub fn zeros(spec: &NetSpec) -> Self {
        Self {
            shapes: spec.shapes(),
            data: vec![0.0; spec.param_count()],
        }
    }

    pub fn from_flat(spec: &NetSpec, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != spec.param_count() {
            return Err(Error::Shape(format!(
                "flat vector has length {}, network has {} parameters",
                flat.len(),
                spec.param_count()
            )));
        }
        Ok(Self {
            shapes: spec.shapes(),
            data: flat,
        })
    }

    pub fn from_layers(layers: &[Array2<f64>]) -> Self {
        let shapes = layers.iter().map(|m| m.dim()).collect();
        let data = layers.iter().flat_map(|m| m.iter().copied()).collect();
        Self { shapes, data }
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn depth(&self) -> usize {
        self.shapes.len()
    }

    fn offset(&self, index: usize) -> usize {
        self.shapes[..index].iter().map(|(r, c)| r * c).sum()
    }

    pub fn layer(&self, index: usize) -> ArrayView2<'_, f64> {
        let (r, c) = self.shapes[index];
        let start = self.offset(index);
        ArrayView2::from_shape((r, c), &self.data[start..start + r * c]).unwrap()
    }

    pub fn layer_mut(&mut self, index: usize) -> ArrayViewMut2<'_, f64> {
        let (r, c) = self.shapes[index];
        let start = self.offset(index);
        ArrayViewMut2::from_shape((r, c), &mut self.data[start..start + r * c]).unwrap()
    }

    pub fn layers(&self) -> Vec<Array2<f64>> {
        (0..self.depth()).map(|l| self.layer(l).to_owned()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            shapes: self.shapes.clone(),
            data: self.data.iter().map(|v| c * v).collect(),
        }
    }

    pub fn dot(&self, other: &Weights) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Checks the stored shapes against `spec`, naming the first bad layer.
    pub fn check(&self, spec: &NetSpec) -> Result<()> {
        if self.shapes.len() != spec.depth() {
            return Err(Error::Shape(format!(
                "weights have {} layers, spec has {}",
                self.shapes.len(),
                spec.depth()
            )));
        }
        for (l, (&got, want)) in self.shapes.iter().zip(spec.shapes()).enumerate() {
            if got != want {
                return Err(Error::DimensionMismatch {
                    layer: l + 1,
                    expected: format!("{}x{}", want.0, want.1),
                    found: format!("{}x{}", got.0, got.1),
                });
            }
        }
        Ok(())
    }
}

/// Inputs as the columns of a `d × n` matrix, plus targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        if x.ncols() != y.len() {
            return Err(Error::Shape(format!(
                "X has {} columns but y has {} entries",
                x.ncols(),
                y.len()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn input(&self, i: usize) -> ArrayView1<'_, f64> {
        self.x.column(i)
    }

    /// Same inputs with the targets replaced.
    pub fn with_targets(&self, y: Array1<f64>) -> Result<Self> {
        Self::new(self.x.clone(), y)
    }

    /// The subset of examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(1), indices),
            y: self.y.select(Axis(0), indices),
        }
    }
}

/// Per-layer quantities of one forward pass. `pre[l]`, `post[l]` and
/// `slopes[l]` belong to hidden layer `l + 1`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub pre: Vec<Array1<f64>>,
    pub post: Vec<Array1<f64>>,
    pub slopes: Vec<Array1<f64>>,
    pub output: f64,
}

pub fn forward(spec: &NetSpec, w: &Weights, x: ArrayView1<'_, f64>) -> Result<(f64, ForwardTrace)> {
    w.check(spec)?;
    if x.len() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            layer: 1,
            expected: format!("input of length {}", spec.input_dim()),
            found: format!("input of length {}", x.len()),
        });
    }
    let act = spec.activation();
    let depth = spec.depth();
    let mut pre = Vec::with_capacity(depth - 1);
    let mut post = Vec::with_capacity(depth - 1);
    let mut slopes = Vec::with_capacity(depth - 1);
    let mut current = x.to_owned();
    for l in 0..depth - 1 {
        let h = w.layer(l).dot(&current);
        let phi = h.mapv(|v| act.eval(v));
        slopes.push(h.mapv(|v| act.derivative(v)));
        pre.push(h);
        post.push(phi.clone());
        current = phi;
    }
    let output = w.layer(depth - 1).dot(&current)[0];
    Ok((
        output,
        ForwardTrace {
            pre,
            post,
            slopes,
            output,
        },
    ))
}

/// Hidden activations of the whole dataset, one column per example.
struct BatchTrace {
    post: Vec<Array2<f64>>,
    slopes: Vec<Array2<f64>>,
    outputs: Array1<f64>,
}

fn forward_batch(spec: &NetSpec, w: &Weights, x: ArrayView2<'_, f64>, keep: bool) -> BatchTrace {
    let act = spec.activation();
    let depth = spec.depth();
    let mut post = Vec::new();
    let mut slopes = Vec::new();
    let mut current = x.to_owned();
    for l in 0..depth - 1 {
        let h = w.layer(l).dot(&current);
        if keep {
            slopes.push(h.mapv(|v| act.derivative(v)));
        }
        let phi = h.mapv(|v| act.eval(v));
        if keep {
            post.push(phi.clone());
        }
        current = phi;
    }
    let outputs = w.layer(depth - 1).dot(&current).row(0).to_owned();
    BatchTrace {
        post,
        slopes,
        outputs,
    }
}

fn check_inputs(spec: &NetSpec, w: &Weights, x: ArrayView2<'_, f64>) -> Result<()> {
    w.check(spec)?;
    if x.nrows() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            layer: 1,
            expected: format!("inputs of dimension {}", spec.input_dim()),
            found: format!("inputs of dimension {}", x.nrows()),
        });
    }
    Ok(())
}

/// `H(X; w)`: the network output for every column of `x`.
pub fn outputs(spec: &NetSpec, w: &Weights, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    check_inputs(spec, w, x)?;
    Ok(forward_batch(spec, w, x, false).outputs)
}

/// Gradient of `Σ_i c_i H(x_i; w)` in the weights, together with `H(X; w)`.
///
/// Layer `l` receives `Σ_i e_i^l (φ_i^{l-1})ᵀ` where `e_i^L = c_i` and
/// `e_i^l = A_i^l W_{l+1}ᵀ e_i^{l+1}`, with `A_i^l` the selected activation
/// slopes. The sums over examples are matrix products over the example axis.
pub fn gradient_and_outputs(
    spec: &NetSpec,
    w: &Weights,
    x: ArrayView2<'_, f64>,
    coeffs: ArrayView1<'_, f64>,
) -> Result<(Weights, Array1<f64>)> {
    check_inputs(spec, w, x)?;
    if coeffs.len() != x.ncols() {
        return Err(Error::Shape(format!(
            "{} coefficients for {} examples",
            coeffs.len(),
            x.ncols()
        )));
    }
    let depth = spec.depth();
    let trace = forward_batch(spec, w, x, true);
    let mut grad = Weights::zeros(spec);
    let n = x.ncols();

    // e^L as a 1 × n row.
    let mut err = coeffs.to_owned().into_shape_with_order((1, n)).unwrap();
    for l in (0..depth).rev() {
        let input = if l == 0 { x } else { trace.post[l - 1].view() };
        grad.layer_mut(l).assign(&err.dot(&input.t()));
        if l > 0 {
            let back = w.layer(l).t().dot(&err);
            err = back * &trace.slopes[l - 1];
        }
    }
    Ok((grad, trace.outputs))
}

/// Gradient of `Σ_i c_i H(x_i; w)` with the first-layer slope forced to zero
/// on every `(unit, example)` pair flagged in `kinked` (a `k_1 × n` mask),
/// and with all slopes above the first layer set to one for the examples in
/// `dead_examples`. Also returns the first-layer sensitivities `W_2ᵀe^2`
/// under the same slopes, one column per example.
pub fn kink_split_gradient(
    spec: &NetSpec,
    w: &Weights,
    x: ArrayView2<'_, f64>,
    coeffs: ArrayView1<'_, f64>,
    kinked: ArrayView2<'_, bool>,
    dead_examples: &[bool],
) -> Result<(Weights, Array2<f64>)> {
    check_inputs(spec, w, x)?;
    let n = x.ncols();
    if coeffs.len() != n || kinked.dim() != (spec.widths[1], n) || dead_examples.len() != n {
        return Err(Error::Shape("kink masks do not match the data".into()));
    }
    let depth = spec.depth();
    let mut trace = forward_batch(spec, w, x, true);
    for ((k, j), &flag) in kinked.indexed_iter() {
        if flag {
            trace.slopes[0][[k, j]] = 0.0;
        }
    }
    for slopes in trace.slopes.iter_mut().skip(1) {
        for (j, &dead) in dead_examples.iter().enumerate() {
            if dead {
                slopes.column_mut(j).fill(1.0);
            }
        }
    }
    let mut grad = Weights::zeros(spec);
    let mut sensitivity = Array2::zeros((spec.widths[1], n));
    let mut err = coeffs.to_owned().into_shape_with_order((1, n)).unwrap();
    for l in (0..depth).rev() {
        let input = if l == 0 { x } else { trace.post[l - 1].view() };
        grad.layer_mut(l).assign(&err.dot(&input.t()));
        if l > 0 {
            let back = w.layer(l).t().dot(&err);
            if l == 1 {
                sensitivity.assign(&back);
            }
            err = back * &trace.slopes[l - 1];
        }
    }
    Ok((grad, sensitivity))
}

pub fn gradient(spec: &NetSpec, w: &Weights, data: &Dataset, coeffs: ArrayView1<'_, f64>) -> Result<Weights> {
    Ok(gradient_and_outputs(spec, w, data.x.view(), coeffs)?.0)
}
