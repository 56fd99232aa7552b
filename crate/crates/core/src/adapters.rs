//! Low-rank adapters over frozen quantized weights.

use crate::error::{structural, Result};
use crate::numerics::{Matrix, Rng, Scalar};
use crate::quantizer::{dequantize, QuantizedTensor};

/// Standard deviation of the initial `A` entries.
pub const LORA_INIT_STD: f64 = 0.02;

/// Low-rank pair with `a: r×d_in`, `b: d_out×r`; the weight update is
/// `(alpha / r)·B·A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<F = f32> {
    pub a: Matrix<F>,
    pub b: Matrix<F>,
    pub alpha: F,
}

impl<F: Scalar> LoraAdapter<F> {
    pub fn new(a: Matrix<F>, b: Matrix<F>, alpha: F) -> Result<Self> {
        if a.rows() == 0 || a.rows() != b.cols() {
            return Err(structural(format!(
                "lora shapes a={:?} b={:?} do not share a positive rank",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self { a, b, alpha })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn scaling(&self) -> F {
        self.alpha / F::of(self.rank() as f64)
    }

    /// `(alpha / r)·B·A`.
    pub fn delta(&self) -> Matrix<F> {
        let ba = self.b.matmul(&self.a).expect("rank checked at construction");
        ba.scale(self.scaling())
    }

    pub fn parameter_count(&self) -> usize {
        self.a.data().len() + self.b.data().len()
    }
}

/// Fresh adapter: `A ~ Normal(0, 0.02²)`, `B = 0`, so the initial update is zero.
pub fn init_lora<F: Scalar>(d_out: usize, d_in: usize, rank: usize, alpha: f64, rng: &mut Rng) -> Result<LoraAdapter<F>> {
    if rank == 0 || rank > d_out.min(d_in) {
        return Err(structural(format!(
            "lora rank {rank} outside 1..={}",
            d_out.min(d_in)
        )));
    }
    let a = Matrix::random_normal(rank, d_in, LORA_INIT_STD, rng);
    let b = Matrix::zeros(d_out, rank);
    LoraAdapter::new(a, b, F::of(alpha))
}

fn check_shapes<F: Scalar>(base: &QuantizedTensor, adapter: &LoraAdapter<F>) -> Result<()> {
    if base.shape() != (adapter.d_out(), adapter.d_in()) {
        return Err(structural(format!(
            "adapter {}x{} does not fit base {:?}",
            adapter.d_out(),
            adapter.d_in(),
            base.shape()
        )));
    }
    Ok(())
}

/// `dequantize(base) + (alpha / r)·B·A`.
pub fn effective_weight<F: Scalar>(base: &QuantizedTensor, adapter: &LoraAdapter<F>) -> Result<Matrix<F>> {
    check_shapes(base, adapter)?;
    dequantize::<F>(base)?.add(&adapter.delta())
}

/// Fuses the adapter into a dense weight for export. Same numbers as
/// [`effective_weight`].
pub fn merge_lora<F: Scalar>(base: &QuantizedTensor, adapter: &LoraAdapter<F>) -> Result<Matrix<F>> {
    effective_weight(base, adapter)
}
