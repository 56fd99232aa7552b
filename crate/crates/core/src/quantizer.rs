//! Block-wise absmax quantization: 4-bit NormalFloat and a symmetric uniform
//! baseline.
//!
//! A matrix is flattened row-major and cut into blocks of `block_size`
//! consecutive elements (the last block may be short). Each block stores one
//! `f32` scale `c = max|w|` and one code per element. 4-bit codes are packed
//! two per byte, element `2i` in the low nibble; 8-bit codes take a byte each.

use crate::error::{data, structural, Result};
use crate::numerics::{Matrix, Scalar};

pub const NF4_BINS: usize = 16;

/// Probability of the outermost NF4 quantile. Half-way between the
/// `1 - 1/(2·15)` and `1 - 1/(2·16)` tails, as used by QLoRA.
pub const NF4_OFFSET: f64 = 0.9677;

/// The sixteen NF4 levels, strictly increasing, from -1 to 1 with an exact 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Nf4Codebook {
    values: [f32; NF4_BINS],
}

impl Nf4Codebook {
    pub fn values(&self) -> &[f32; NF4_BINS] {
        &self.values
    }

    pub fn zero_index(&self) -> usize {
        self.values.iter().position(|&v| v == 0.0).unwrap()
    }

    /// Index of the nearest level; ties go to the smaller index.
    pub fn nearest(&self, x: f64) -> u8 {
        nearest_level(&self.values, x)
    }
}

fn nearest_level(levels: &[f32], x: f64) -> u8 {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, &v) in levels.iter().enumerate() {
        let d = (x - v as f64).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best as u8
}

/// Builds the asymmetric NF4 table.
///
/// Positive side: the standard Normal quantiles at 8 evenly spaced
/// probabilities from `NF4_OFFSET` down towards 0.5 (exclusive). Negative
/// side: the negated quantiles at 7 evenly spaced probabilities over the
/// same range. Zero is added, the 16 values are sorted and divided by the
/// largest one, so the extremes land on -1 and +1.
pub fn nf4_codebook() -> Nf4Codebook {
    let positive = linspace_exclusive(NF4_OFFSET, 0.5, 8).map(probit);
    let negative = linspace_exclusive(NF4_OFFSET, 0.5, 7).map(|p| -probit(p));
    let mut raw: Vec<f64> = positive.chain(std::iter::once(0.0)).chain(negative).collect();
    raw.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let max = raw[NF4_BINS - 1];
    let mut values = [0f32; NF4_BINS];
    for (v, r) in values.iter_mut().zip(&raw) {
        *v = (r / max) as f32;
    }
    Nf4Codebook { values }
}

/// `count` points of `linspace(start, end, count + 1)`, dropping `end`.
fn linspace_exclusive(start: f64, end: f64, count: usize) -> impl Iterator<Item = f64> {
    let step = (end - start) / count as f64;
    (0..count).map(move |i| start + step * i as f64)
}

/// Inverse standard Normal CDF (Acklam's rational approximation,
/// relative error below 1.2e-9 over (0, 1)).
pub(crate) fn probit(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -probit(1.0 - p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Nf4,
    /// Symmetric grid of `2^bits - 1` levels over `[-c, c]`; `bits ∈ {4, 8}`.
    Uniform { bits: u8 },
}

impl Scheme {
    pub fn bits(self) -> u8 {
        match self {
            Scheme::Nf4 => 4,
            Scheme::Uniform { bits } => bits,
        }
    }

    /// Number of valid code values.
    pub fn bin_count(self) -> usize {
        match self {
            Scheme::Nf4 => NF4_BINS,
            Scheme::Uniform { bits } => (1usize << bits) - 1,
        }
    }

    fn uniform_half_levels(bits: u8) -> i32 {
        (1i32 << (bits - 1)) - 1
    }

    fn validate(self) -> Result<()> {
        match self {
            Scheme::Nf4 | Scheme::Uniform { bits: 4 } | Scheme::Uniform { bits: 8 } => Ok(()),
            Scheme::Uniform { bits } => Err(structural(format!("uniform bits must be 4 or 8, got {bits}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Nf4 => "nf4",
            Scheme::Uniform { bits: 8 } => "uniform8",
            Scheme::Uniform { .. } => "uniform4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nf4" => Ok(Scheme::Nf4),
            "uniform4" => Ok(Scheme::Uniform { bits: 4 }),
            "uniform8" => Ok(Scheme::Uniform { bits: 8 }),
            other => Err(structural(format!("unknown quantization scheme {other:?}"))),
        }
    }
}

/// Packed codes plus one absmax scale per block.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    block_size: usize,
    scheme: Scheme,
    scales: Vec<f32>,
    codes: Vec<u8>,
}

impl QuantizedTensor {
    /// Reassembles a tensor from its stored parts, validating sizes.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        block_size: usize,
        scheme: Scheme,
        scales: Vec<f32>,
        codes: Vec<u8>,
    ) -> Result<Self> {
        scheme.validate()?;
        if block_size == 0 {
            return Err(structural("block_size must be at least 1"));
        }
        let n = rows * cols;
        if scales.len() != n.div_ceil(block_size) {
            return Err(data(format!(
                "expected {} scales, found {}",
                n.div_ceil(block_size),
                scales.len()
            )));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(data("scales must be finite and non-negative"));
        }
        if codes.len() != packed_len(n, scheme) {
            return Err(data(format!(
                "expected {} code bytes, found {}",
                packed_len(n, scheme),
                codes.len()
            )));
        }
        Ok(Self { rows, cols, block_size, scheme, scales, codes })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// Raw packed code bytes.
    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn num_blocks(&self) -> usize {
        self.scales.len()
    }

    pub fn code(&self, i: usize) -> u8 {
        match self.scheme.bits() {
            4 => {
                let byte = self.codes[i / 2];
                if i % 2 == 0 {
                    byte & 0x0F
                } else {
                    byte >> 4
                }
            }
            _ => self.codes[i],
        }
    }

    pub fn codes(&self) -> Vec<u8> {
        (0..self.len()).map(|i| self.code(i)).collect()
    }

    /// Bytes this tensor occupies in storage: scales plus packed codes.
    pub fn storage_bytes(&self) -> usize {
        self.scales.len() * 4 + self.codes.len()
    }
}

fn packed_len(n: usize, scheme: Scheme) -> usize {
    match scheme.bits() {
        4 => n.div_ceil(2),
        _ => n,
    }
}

/// Packs 4-bit codes two per byte, element `2i` in the low nibble.
pub fn pack_nibbles(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| (pair[0] & 0x0F) | (pair.get(1).copied().unwrap_or(0) & 0x0F) << 4)
        .collect()
}

/// Inverse of [`pack_nibbles`] for `count` codes.
pub fn unpack_nibbles(packed: &[u8], count: usize) -> Vec<u8> {
    (0..count)
        .map(|i| {
            let b = packed[i / 2];
            if i % 2 == 0 {
                b & 0x0F
            } else {
                b >> 4
            }
        })
        .collect()
}

fn check_input<F: Scalar>(w: &Matrix<F>, block_size: usize) -> Result<()> {
    if block_size == 0 {
        return Err(structural("block_size must be at least 1"));
    }
    if !w.is_finite() {
        return Err(data("cannot quantize non-finite weights"));
    }
    Ok(())
}

/// Quantizes `w` block-wise with the given scheme.
pub fn quantize<F: Scalar>(w: &Matrix<F>, block_size: usize, scheme: Scheme) -> Result<QuantizedTensor> {
    scheme.validate()?;
    check_input(w, block_size)?;
    match scheme {
        Scheme::Nf4 => quantize_nf4(w, block_size),
        Scheme::Uniform { bits } => quantize_uniform(w, bits, block_size),
    }
}

fn quantize_nf4<F: Scalar>(w: &Matrix<F>, block_size: usize) -> Result<QuantizedTensor> {
    let book = nf4_codebook();
    let zero = book.zero_index() as u8;
    let (scales, codes) = quantize_blocks(w, block_size, |x| book.nearest(x), zero);
    QuantizedTensor::from_parts(w.rows(), w.cols(), block_size, Scheme::Nf4, scales, pack_nibbles(&codes))
}

/// Symmetric uniform absmax quantization, nearest level with ties toward
/// the smaller magnitude.
pub fn quantize_uniform<F: Scalar>(w: &Matrix<F>, bits: u8, block_size: usize) -> Result<QuantizedTensor> {
    let scheme = Scheme::Uniform { bits };
    scheme.validate()?;
    check_input(w, block_size)?;
    let half = Scheme::uniform_half_levels(bits);
    let to_code = |x: f64| {
        let scaled = x * half as f64;
        let mag = (scaled.abs() - 0.5).ceil().clamp(0.0, half as f64);
        let q = if scaled < 0.0 { -mag } else { mag } as i32;
        (q + half) as u8
    };
    let (scales, codes) = quantize_blocks(w, block_size, to_code, half as u8);
    let codes = if bits == 4 { pack_nibbles(&codes) } else { codes };
    QuantizedTensor::from_parts(w.rows(), w.cols(), block_size, scheme, scales, codes)
}

fn quantize_blocks<F: Scalar>(
    w: &Matrix<F>,
    block_size: usize,
    to_code: impl Fn(f64) -> u8,
    zero_code: u8,
) -> (Vec<f32>, Vec<u8>) {
    let flat = w.data();
    let mut scales = Vec::with_capacity(flat.len().div_ceil(block_size));
    let mut codes = Vec::with_capacity(flat.len());
    for block in flat.chunks(block_size) {
        let absmax = block.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max);
        let scale = absmax as f32;
        scales.push(scale);
        if scale == 0.0 {
            codes.extend(std::iter::repeat_n(zero_code, block.len()));
        } else {
            let c = scale as f64;
            codes.extend(block.iter().map(|v| to_code(v.as_f64() / c)));
        }
    }
    (scales, codes)
}

/// The normalized level for each code value of `scheme`.
pub fn levels(scheme: Scheme) -> Vec<f32> {
    match scheme {
        Scheme::Nf4 => nf4_codebook().values.to_vec(),
        Scheme::Uniform { bits } => {
            let half = Scheme::uniform_half_levels(bits);
            (-half..=half).map(|q| q as f32 / half as f32).collect()
        }
    }
}

/// Reconstructs `c_block · level[code]` for every element.
pub fn dequantize<F: Scalar>(q: &QuantizedTensor) -> Result<Matrix<F>> {
    let table = levels(q.scheme);
    let bins = q.scheme.bin_count();
    let mut out = Vec::with_capacity(q.len());
    for i in 0..q.len() {
        let code = q.code(i) as usize;
        if code >= bins {
            return Err(data(format!("code {code} at element {i} exceeds {bins} bins")));
        }
        let scale = q.scales[i / q.block_size];
        out.push(F::of_f32(scale * table[code]));
    }
    Ok(Matrix::from_vec_unchecked(q.rows, q.cols, out))
}

/// Reconstruction error of `q` against the original `w`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantError {
    /// `‖dequant − w‖_F / max(‖w‖_F, 1e-12)`.
    pub rel_frobenius: f64,
    pub max_abs: f64,
}

pub fn quant_error<F: Scalar>(w: &Matrix<F>, q: &QuantizedTensor) -> Result<QuantError> {
    if w.shape() != q.shape() {
        return Err(structural(format!(
            "quant_error shapes {:?} vs {:?}",
            w.shape(),
            q.shape()
        )));
    }
    let deq = dequantize::<f64>(q)?;
    let mut diff_sq = 0.0;
    let mut max_abs: f64 = 0.0;
    for (a, b) in w.data().iter().zip(deq.data()) {
        let d = a.as_f64() - b;
        diff_sq += d * d;
        max_abs = max_abs.max(d.abs());
    }
    let denom = w.frobenius().max(1e-12);
    Ok(QuantError {
        rel_frobenius: diff_sq.sqrt() / denom,
        max_abs,
    })
}

/// Mean squared reconstruction error.
pub fn quant_mse<F: Scalar>(w: &Matrix<F>, q: &QuantizedTensor) -> Result<f64> {
    let deq = dequantize::<f64>(q)?;
    let n = w.data().len().max(1) as f64;
    Ok(w
        .data()
        .iter()
        .zip(deq.data())
        .map(|(a, b)| (a.as_f64() - b).powi(2))
        .sum::<f64>()
        / n)
}
