//! Dense kernels, nonlinearities and the seeded random source.
//!
//! Every reduction sums left to right in index order so results are
//! reproducible bit-for-bit. Two precisions are supported through
//! [`Scalar`]: `f32` for normal runs and `f64` for gradient checking.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{data, structural, Result};

/// Floating-point element type used by all tensors.
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn of_f32(v: f32) -> Self;
    fn as_f64(self) -> f64;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn of_f32(v: f32) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn of_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<F = f32> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    /// Builds a matrix, checking the length and that every entry is finite.
    pub fn new(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(structural(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(data_err_nonfinite());
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<F>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = F::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Entries drawn from `Normal(0, std²)`.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| F::of(rng.normal() * std))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: F) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Standard product `self × rhs`.
    pub fn matmul(&self, rhs: &Matrix<F>) -> Result<Matrix<F>> {
        if self.cols != rhs.rows {
            return Err(structural(format!(
                "matmul of {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        gemm_acc(self.rows, self.cols, rhs.cols, &self.data, &rhs.data, &mut out.data);
        Ok(out)
    }

    pub fn add(&self, rhs: &Matrix<F>) -> Result<Matrix<F>> {
        if self.shape() != rhs.shape() {
            return Err(structural(format!(
                "add of {:?} and {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect();
        Ok(Self::from_vec_unchecked(self.rows, self.cols, data))
    }

    pub fn scale(&self, s: F) -> Matrix<F> {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Matrix<F> {
        Self::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<G: Scalar>(&self) -> Matrix<G> {
        Matrix::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }
}

fn data_err_nonfinite() -> crate::error::Error {
    data("matrix contains non-finite entries")
}

/// `c += a × b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
///
/// Each output cell accumulates its k terms in increasing k order, which is
/// the same order as the textbook triple loop.
pub(crate) fn gemm_acc<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += a_ip * bj;
            }
        }
    }
}

/// `y = W x` for `W: rows×cols` row-major.
pub(crate) fn matvec<F: Scalar>(w: &Matrix<F>, x: &[F]) -> Vec<F> {
    debug_assert_eq!(w.cols(), x.len());
    (0..w.rows()).map(|i| dot(w.row(i), x)).collect()
}

pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// A probability distribution over the action set.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector<F = f32>(Vec<F>);

impl<F: Scalar> ProbVector<F> {
    /// Validates entries in `[0, 1]` summing to one within `1e-6`.
    pub fn new(p: Vec<F>) -> Result<Self> {
        if p.is_empty() {
            return Err(structural("empty probability vector"));
        }
        if p.iter().any(|&v| !(v >= F::zero() && v <= F::one())) {
            return Err(data("probability entry outside [0, 1]"));
        }
        let sum: f64 = p.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(data(format!("probabilities sum to {sum}")));
        }
        Ok(Self(p))
    }

    pub(crate) fn from_vec_unchecked(p: Vec<F>) -> Self {
        Self(p)
    }

    pub fn as_slice(&self) -> &[F] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Max-subtracted softmax.
pub fn softmax<F: Scalar>(logits: &[F]) -> Result<ProbVector<F>> {
    if logits.is_empty() {
        return Err(structural("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(data("softmax input is not finite"));
    }
    Ok(ProbVector(softmax_raw(logits)))
}

pub(crate) fn softmax_raw<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let mut out: Vec<F> = logits.iter().map(|&v| (v - max).exp()).collect();
    let mut sum = F::zero();
    for &v in &out {
        sum += v;
    }
    for v in &mut out {
        *v = *v / sum;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Tanh approximation `0.5 x (1 + tanh(√(2/π) (x + 0.044715 x³)))`.
    Gelu,
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

pub fn activation<F: Scalar>(x: &[F], kind: Activation) -> Vec<F> {
    match kind {
        Activation::Relu => x.iter().map(|&v| relu(v)).collect(),
        Activation::Gelu => x.iter().map(|&v| gelu(v)).collect(),
    }
}

pub(crate) fn relu<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        F::zero()
    }
}

pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_SQRT_2_OVER_PI);
    let k = F::of(GELU_CUBIC);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_SQRT_2_OVER_PI);
    let k = F::of(GELU_CUBIC);
    let half = F::of(0.5);
    let three = F::of(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes to zero mean and unit variance (`ε = 1e-5` under the root),
/// then applies `gain` and `bias`.
pub fn layer_norm<F: Scalar>(x: &[F], gain: &[F], bias: &[F]) -> Result<Vec<F>> {
    if x.is_empty() || gain.len() != x.len() || bias.len() != x.len() {
        return Err(structural(format!(
            "layer_norm lengths x={} gain={} bias={}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    let mut out = vec![F::zero(); x.len()];
    layer_norm_into(x, gain, bias, &mut out, None);
    Ok(out)
}

/// Writes the normalized row into `out`; optionally stores `x̂` for backprop.
/// Returns `1/σ`.
pub(crate) fn layer_norm_into<F: Scalar>(
    x: &[F],
    gain: &[F],
    bias: &[F],
    out: &mut [F],
    xhat_out: Option<&mut [F]>,
) -> F {
    let n = F::of(x.len() as f64);
    let mut mean = F::zero();
    for &v in x {
        mean += v;
    }
    mean = mean / n;
    let mut var = F::zero();
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var = var / n;
    let inv_std = F::one() / (var + F::of(LAYER_NORM_EPS)).sqrt();
    match xhat_out {
        Some(xh) => {
            for i in 0..x.len() {
                let h = (x[i] - mean) * inv_std;
                xh[i] = h;
                out[i] = gain[i] * h + bias[i];
            }
        }
        None => {
            for i in 0..x.len() {
                out[i] = gain[i] * ((x[i] - mean) * inv_std) + bias[i];
            }
        }
    }
    inv_std
}

/// SplitMix64: a counter-based 64-bit generator.
///
/// The state advances by the constant `0x9E3779B97F4A7C15` and each output
/// is the Stafford "mix13" finalizer of the new state. Uniform doubles take
/// the top 53 bits; normals use Box–Muller with the cosine branch only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, state: seed }
    }

    /// A generator for a named sub-purpose of `seed`.
    pub fn derived(seed: u64, purpose: &str) -> Self {
        Self::new(derive_seed(seed, purpose))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`, rejection-sampled to avoid modulo bias.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Fans a root seed out to a named purpose: FNV-1a over the purpose bytes,
/// combined with the root and passed through the SplitMix64 finalizer.
pub fn derive_seed(root: u64, purpose: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(root.wrapping_mul(GOLDEN_GAMMA) ^ h)
}
