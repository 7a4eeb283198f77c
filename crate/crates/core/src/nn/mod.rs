//! Minimal dense layers with explicit forward caches and hand-written backward passes.
//!
//! Activations are row-major token matrices (`rows x features`). Every `backward`
//! accumulates parameter gradients and returns the gradient with respect to its input.

mod attention;

pub use attention::{Attention, AttentionCache, Block, BlockCache};

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A trainable array with its gradient and Adam moments.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    touched: bool,
    m: Array2<f64>,
    v: Array2<f64>,
    steps: u64,
}

impl Param {
    pub fn new(value: Array2<f64>) -> Self {
        let dim = value.raw_dim();
        Self { grad: Array2::zeros(dim), m: Array2::zeros(dim), v: Array2::zeros(dim), value, touched: false, steps: 0 }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Array2::zeros((rows, cols)))
    }

    pub fn normal<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        Self::new(Array2::from_shape_fn((rows, cols), |_| dist.sample(rng)))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.value.nrows(), self.value.ncols()]
    }

    /// Whether any gradient reached this parameter since the last `zero_grad`.
    pub fn touched(&self) -> bool {
        self.touched
    }

    pub fn accumulate(&mut self, g: ArrayView2<f64>) {
        self.grad += &g;
        self.touched = true;
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
        self.touched = false;
    }

    /// Drops the optimizer moments, e.g. between stages.
    pub fn reset_moments(&mut self) {
        self.m.fill(0.0);
        self.v.fill(0.0);
        self.steps = 0;
    }

    pub fn max_abs_grad(&self) -> f64 {
        self.grad.iter().fold(0.0, |a, g| a.max(g.abs()))
    }
}

/// Callback over named parameters.
pub trait Visit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Adam with optional coupled L2 weight decay. Moments and step counts live in each
/// `Param`, and parameters that received no gradient in a step are left untouched.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl Adam {
    pub fn update(&self, p: &mut Param, lr: f64) {
        if !p.touched {
            return;
        }
        p.steps += 1;
        let (b1, b2, wd) = (self.beta1, self.beta2, self.weight_decay);
        let c1 = 1.0 - b1.powi(p.steps as i32);
        let c2 = 1.0 - b2.powi(p.steps as i32);
        Zip::from(&mut p.value).and(&p.grad).and(&mut p.m).and(&mut p.v).for_each(|w, &g, m, v| {
            let g = g + wd * *w;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        });
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`; libm's `tanh` dominated the extractor's profile.
fn tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_A * x * x * x)))
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu_forward(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(gelu)
}

/// `dy * gelu'(x)` where `x` is the pre-activation.
pub fn gelu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &x| *d *= gelu_grad(x));
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    /// Normal init with std `1 / sqrt(inputs)` and zero bias.
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self { w: Param::normal(inputs, outputs, (inputs as f64).powf(-0.5), rng), b: Param::zeros(1, outputs) }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { w: Param::zeros(inputs, outputs), b: Param::zeros(1, outputs) }
    }

    pub fn inputs(&self) -> usize {
        self.w.value.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.w.value.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.value) + &self.b.value
    }

    /// Accumulates parameter gradients for input `x` and returns `dL/dx`.
    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        self.backward_params(x, dy);
        dy.dot(&self.w.value.t())
    }

    /// Parameter gradients only, for layers fed by constants.
    pub fn backward_params(&mut self, x: &Array2<f64>, dy: &Array2<f64>) {
        self.w.accumulate(x.t().dot(dy).view());
        self.b.accumulate(dy.sum_axis(Axis(0)).insert_axis(Axis(0)).view());
    }

    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.inputs() * self.outputs()) as u64
    }
}

impl Visit for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

/// Per-feature affine `y = (x - shift) * scale`, identity at construction.
#[derive(Clone, Debug)]
pub struct Standardize {
    pub shift: Param,
    pub scale: Param,
}

impl Standardize {
    pub fn new(dim: usize) -> Self {
        Self { shift: Param::zeros(1, dim), scale: Param::new(Array2::ones((1, dim))) }
    }

    /// Sets shift and scale to the column means and inverse standard deviations of `x`.
    /// Columns with (near) zero spread keep a unit scale.
    pub fn fit(&mut self, x: &Array2<f64>) {
        let n = x.nrows().max(1) as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        for (j, col) in x.columns().into_iter().enumerate() {
            let m = mean[j];
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            self.shift.value[[0, j]] = m;
            self.scale.value[[0, j]] = if sd > 1e-9 { 1.0 / sd } else { 1.0 };
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.shift.value) * &self.scale.value
    }

    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        let centered = x - &self.shift.value;
        self.scale.accumulate((dy * &centered).sum_axis(Axis(0)).insert_axis(Axis(0)).view());
        let dx = dy * &self.scale.value;
        self.shift.accumulate((-&dx).sum_axis(Axis(0)).insert_axis(Axis(0)).view());
        dx
    }
}

impl Visit for Standardize {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "shift"), &self.shift);
        f(&join(prefix, "scale"), &self.scale);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "shift"), &mut self.shift);
        f(&join(prefix, "scale"), &mut self.scale);
    }
}

/// Row-wise layer normalization.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    eps: f64,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { gamma: Param::new(Array2::ones((1, dim))), beta: Param::zeros(1, dim), eps: 1e-5 }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut rstd = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let r = 1.0 / (var + self.eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let y = &xhat * &self.gamma.value + &self.beta.value;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Array2<f64>) -> Array2<f64> {
        self.gamma.accumulate((dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0)).view());
        self.beta.accumulate(dy.sum_axis(Axis(0)).insert_axis(Axis(0)).view());
        let mut dx = dy * &self.gamma.value;
        let d = dx.ncols() as f64;
        for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
            let mean_d = row.sum() / d;
            let mean_dx = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
            Zip::from(&mut row).and(&xh).for_each(|g, &h| *g = r * (*g - mean_d - h * mean_dx));
        }
        dx
    }
}

impl Visit for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Inverted-dropout mask: zeros with probability `p`, otherwise `1 / (1 - p)`.
pub fn dropout_mask<R: Rng>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn((rows, cols), |_| if rng.random::<f64>() < p { 0.0 } else { keep })
}
