//! Multi-exit transformer action model and the entropy-gated early-exit
//! inference engine.
//!
//! An observation becomes a token sequence `[readout, row_0 … row_{k-1},
//! compass]`. Each pre-norm transformer block updates every token; the
//! readout token's embedding after layer `l` is the summary `z_l` that the
//! exit head at `l` (and the final head at `L`) classifies into an action.

pub(crate) mod forward;

pub use forward::{argmax_action, entropy, exit_head_forward, DeeOutcome, FullForward, Prepared};

use serde::{Deserialize, Serialize};

use crate::adapters::{init_lora, LoraAdapter};
use crate::error::{structural, Result};
use crate::navsim::ACTION_COUNT;
use crate::numerics::{Matrix, Rng, Scalar};
use crate::quantizer::{dequantize, quant_error, quantize, QuantError, QuantizedTensor, Scheme};

/// Number of inputs of the compass token projection: right, forward, visible.
pub const COMPASS_FEATURES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    /// 1-based layers carrying an exit head, strictly increasing, each `< num_layers`.
    pub exit_layers: Vec<usize>,
    pub action_count: usize,
    pub exit_hidden: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub block_size: usize,
    /// Side of the square egocentric observation window.
    pub window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            d_model: 64,
            num_heads: 4,
            d_ff: 256,
            exit_layers: vec![2, 4],
            action_count: ACTION_COUNT,
            exit_hidden: 32,
            lora_rank: 8,
            lora_alpha: 16.0,
            block_size: 64,
            window: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(structural(m));
        if self.num_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.exit_hidden == 0 {
            return fail("layer count and widths must be positive".into());
        }
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.num_heads));
        }
        if !self.exit_layers.windows(2).all(|w| w[0] < w[1]) {
            return fail("exit_layers must be strictly increasing".into());
        }
        if self.exit_layers.iter().any(|&l| l == 0 || l >= self.num_layers) {
            return fail(format!("exit_layers must lie in 1..{}", self.num_layers));
        }
        if self.action_count != ACTION_COUNT {
            return fail(format!("action_count must be {ACTION_COUNT}"));
        }
        if self.lora_rank == 0 || self.lora_rank > self.d_model {
            return fail(format!("lora_rank must lie in 1..={}", self.d_model));
        }
        if !self.lora_alpha.is_finite() {
            return fail("lora_alpha must be finite".into());
        }
        if self.block_size == 0 {
            return fail("block_size must be positive".into());
        }
        if self.window == 0 || self.window % 2 == 0 {
            return fail("window must be odd".into());
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.window + 2
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// Position of `layer` in `exit_layers`, if it carries an exit head.
    pub fn exit_index(&self, layer: usize) -> Option<usize> {
        self.exit_layers.iter().position(|&l| l == layer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    FullPrecision,
    Quantized,
}

/// Which parameters an optimizer step may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainPhase {
    /// Full-precision behaviour cloning: every dense parameter; exit heads
    /// only when `exit_heads` is set.
    Pretrain { exit_heads: bool },
    /// Quantized fine-tuning: adapters, heads and the token embedder.
    Finetune,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Weight<F: Scalar> {
    Dense(Matrix<F>),
    /// Frozen quantized base.
    Quantized(QuantizedTensor),
}

/// `y = W x (+ b)` with an optional low-rank update on `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F: Scalar> {
    pub weight: Weight<F>,
    pub bias: Option<Vec<F>>,
    pub lora: Option<LoraAdapter<F>>,
}

impl<F: Scalar> Linear<F> {
    fn dense(w: Matrix<F>, bias: bool) -> Self {
        let out = w.rows();
        Self {
            weight: Weight::Dense(w),
            bias: bias.then(|| vec![F::zero(); out]),
            lora: None,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match &self.weight {
            Weight::Dense(m) => m.shape(),
            Weight::Quantized(q) => q.shape(),
        }
    }

    /// Base weight plus the adapter update, as used by the forward pass.
    pub fn effective(&self) -> Result<Matrix<F>> {
        let base = match &self.weight {
            Weight::Dense(m) => m.clone(),
            Weight::Quantized(q) => dequantize::<F>(q)?,
        };
        match &self.lora {
            Some(ad) => base.add(&ad.delta()),
            None => Ok(base),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<F> {
    pub gain: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> LayerNormParams<F> {
    fn new(d: usize) -> Self {
        Self {
            gain: vec![F::one(); d],
            bias: vec![F::zero(); d],
        }
    }
}

/// Pre-norm transformer block: attention then a gelu MLP, both residual.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<F: Scalar> {
    pub ln1: LayerNormParams<F>,
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    pub ln2: LayerNormParams<F>,
    pub ff1: Linear<F>,
    pub ff2: Linear<F>,
}

impl<F: Scalar> Block<F> {
    pub fn linears(&self) -> [(&'static str, &Linear<F>); 6] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ff1", &self.ff1),
            ("ff2", &self.ff2),
        ]
    }

    pub fn linears_mut(&mut self) -> [(&'static str, &mut Linear<F>); 6] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ff1", &mut self.ff1),
            ("ff2", &mut self.ff2),
        ]
    }
}

/// Two-layer MLP classifier `softmax(W₂ relu(W₁ z + b₁) + b₂)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitHead<F> {
    pub w1: Matrix<F>,
    pub b1: Vec<F>,
    pub w2: Matrix<F>,
    pub b2: Vec<F>,
}

impl<F: Scalar> ExitHead<F> {
    pub fn new(d: usize, hidden: usize, actions: usize, rng: &mut Rng) -> Self {
        Self {
            w1: Matrix::random_normal(hidden, d, 1.0 / (d as f64).sqrt(), rng),
            b1: vec![F::zero(); hidden],
            w2: Matrix::random_normal(actions, hidden, 1.0 / (hidden as f64).sqrt(), rng),
            b2: vec![F::zero(); actions],
        }
    }

    pub fn zeros(d: usize, hidden: usize, actions: usize) -> Self {
        Self {
            w1: Matrix::zeros(hidden, d),
            b1: vec![F::zero(); hidden],
            w2: Matrix::zeros(actions, hidden),
            b2: vec![F::zero(); actions],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len()
    }
}

/// Learned projections from an observation to the token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedder<F> {
    /// `d × window`: one window row to one token.
    pub row_proj: Matrix<F>,
    pub row_bias: Vec<F>,
    /// `d × 3`: (right, forward, visible) to the compass token.
    pub compass_proj: Matrix<F>,
    pub compass_bias: Vec<F>,
    /// `(window + 2) × d` learned position embeddings.
    pub positions: Matrix<F>,
    pub readout: Vec<F>,
}

impl<F: Scalar> Embedder<F> {
    pub fn parameter_count(&self) -> usize {
        self.row_proj.data().len()
            + self.row_bias.len()
            + self.compass_proj.data().len()
            + self.compass_bias.len()
            + self.positions.data().len()
            + self.readout.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiExitModel<F: Scalar = f32> {
    pub config: ModelConfig,
    pub mode: ModelMode,
    pub embedder: Embedder<F>,
    pub blocks: Vec<Block<F>>,
    /// One head per entry of `config.exit_layers`, in order.
    pub exit_heads: Vec<ExitHead<F>>,
    pub final_head: ExitHead<F>,
}

/// Options for converting a full-precision model to quantized mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizeOptions {
    pub scheme: Scheme,
    /// Quantize every block projection instead of only query and value.
    pub all_linear: bool,
    /// Attach adapters to the query and value projections.
    pub attach_lora: bool,
}

impl Default for QuantizeOptions {
    fn default() -> Self {
        Self {
            scheme: Scheme::Nf4,
            all_linear: false,
            attach_lora: true,
        }
    }
}

impl<F: Scalar> MultiExitModel<F> {
    /// Randomly initialized full-precision model.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let k = config.window;
        let in_std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let out_std = in_std(d) / (2.0 * config.num_layers as f64).sqrt();
        let embedder = Embedder {
            row_proj: Matrix::random_normal(d, k, in_std(k), rng),
            row_bias: vec![F::zero(); d],
            compass_proj: Matrix::random_normal(d, COMPASS_FEATURES, 1.0, rng),
            compass_bias: vec![F::zero(); d],
            positions: Matrix::random_normal(config.seq_len(), d, 0.3, rng),
            readout: Matrix::<F>::random_normal(1, d, 0.3, rng).into_data(),
        };
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                ln1: LayerNormParams::new(d),
                wq: Linear::dense(Matrix::random_normal(d, d, in_std(d), rng), false),
                wk: Linear::dense(Matrix::random_normal(d, d, in_std(d), rng), false),
                wv: Linear::dense(Matrix::random_normal(d, d, in_std(d), rng), false),
                wo: Linear::dense(Matrix::random_normal(d, d, out_std, rng), false),
                ln2: LayerNormParams::new(d),
                ff1: Linear::dense(Matrix::random_normal(config.d_ff, d, in_std(d), rng), true),
                ff2: Linear::dense(
                    Matrix::random_normal(d, config.d_ff, in_std(config.d_ff) / (2.0 * config.num_layers as f64).sqrt(), rng),
                    true,
                ),
            })
            .collect();
        let exit_heads = config
            .exit_layers
            .iter()
            .map(|_| ExitHead::new(d, config.exit_hidden, config.action_count, rng))
            .collect();
        let final_head = ExitHead::new(d, config.exit_hidden, config.action_count, rng);
        Ok(Self {
            config,
            mode: ModelMode::FullPrecision,
            embedder,
            blocks,
            exit_heads,
            final_head,
        })
    }

    /// Same structure with every trainable value set to zero. Quantized
    /// bases are kept as they are (they carry no gradient).
    pub fn zeros_like(&self) -> Self {
        let zm = |m: &Matrix<F>| Matrix::zeros(m.rows(), m.cols());
        let zv = |v: &Vec<F>| vec![F::zero(); v.len()];
        let zl = |l: &Linear<F>| Linear {
            weight: match &l.weight {
                Weight::Dense(m) => Weight::Dense(zm(m)),
                Weight::Quantized(q) => Weight::Quantized(q.clone()),
            },
            bias: l.bias.as_ref().map(zv),
            lora: l.lora.as_ref().map(|a| LoraAdapter {
                a: zm(&a.a),
                b: zm(&a.b),
                alpha: a.alpha,
            }),
        };
        let zh = |h: &ExitHead<F>| ExitHead {
            w1: zm(&h.w1),
            b1: zv(&h.b1),
            w2: zm(&h.w2),
            b2: zv(&h.b2),
        };
        let zn = |n: &LayerNormParams<F>| LayerNormParams {
            gain: zv(&n.gain),
            bias: zv(&n.bias),
        };
        let e = &self.embedder;
        Self {
            config: self.config.clone(),
            mode: self.mode,
            embedder: Embedder {
                row_proj: zm(&e.row_proj),
                row_bias: zv(&e.row_bias),
                compass_proj: zm(&e.compass_proj),
                compass_bias: zv(&e.compass_bias),
                positions: zm(&e.positions),
                readout: zv(&e.readout),
            },
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: zn(&b.ln1),
                    wq: zl(&b.wq),
                    wk: zl(&b.wk),
                    wv: zl(&b.wv),
                    wo: zl(&b.wo),
                    ln2: zn(&b.ln2),
                    ff1: zl(&b.ff1),
                    ff2: zl(&b.ff2),
                })
                .collect(),
            exit_heads: self.exit_heads.iter().map(zh).collect(),
            final_head: zh(&self.final_head),
        }
    }

    /// Converts the block projections to frozen quantized bases and attaches
    /// fresh adapters (zero update) to the query and value projections.
    pub fn quantize(&self, opts: QuantizeOptions, rng: &mut Rng) -> Result<(Self, Vec<(String, QuantError)>)> {
        if self.mode != ModelMode::FullPrecision {
            return Err(structural("model is already quantized"));
        }
        let mut out = self.clone();
        out.mode = ModelMode::Quantized;
        let mut report = Vec::new();
        let block_size = self.config.block_size;
        for (l, block) in out.blocks.iter_mut().enumerate() {
            for (name, lin) in block.linears_mut() {
                let is_qv = name == "wq" || name == "wv";
                if !(is_qv || opts.all_linear) {
                    continue;
                }
                let Weight::Dense(w) = &lin.weight else { unreachable!() };
                let q = quantize(w, block_size, opts.scheme)?;
                report.push((format!("blocks.{l}.{name}"), quant_error(w, &q)?));
                let (d_out, d_in) = w.shape();
                lin.weight = Weight::Quantized(q);
                if is_qv && opts.attach_lora {
                    lin.lora = Some(init_lora(d_out, d_in, self.config.lora_rank, self.config.lora_alpha, rng)?);
                }
            }
        }
        Ok((out, report))
    }

    /// Full-precision copy whose block weights are the current effective
    /// weights (dequantized base plus adapter update).
    pub fn to_dense(&self) -> Result<Self> {
        let mut out = self.clone();
        out.mode = ModelMode::FullPrecision;
        for block in &mut out.blocks {
            for (_, lin) in block.linears_mut() {
                let eff = lin.effective()?;
                lin.weight = Weight::Dense(eff);
                lin.lora = None;
            }
        }
        Ok(out)
    }

    pub fn cast<G: Scalar>(&self) -> MultiExitModel<G> {
        let cv = |v: &Vec<F>| v.iter().map(|x| G::of(x.as_f64())).collect::<Vec<G>>();
        let cl = |l: &Linear<F>| Linear {
            weight: match &l.weight {
                Weight::Dense(m) => Weight::Dense(m.cast()),
                Weight::Quantized(q) => Weight::Quantized(q.clone()),
            },
            bias: l.bias.as_ref().map(cv),
            lora: l.lora.as_ref().map(|a| LoraAdapter {
                a: a.a.cast(),
                b: a.b.cast(),
                alpha: G::of(a.alpha.as_f64()),
            }),
        };
        let ch = |h: &ExitHead<F>| ExitHead {
            w1: h.w1.cast(),
            b1: cv(&h.b1),
            w2: h.w2.cast(),
            b2: cv(&h.b2),
        };
        let cn = |n: &LayerNormParams<F>| LayerNormParams {
            gain: cv(&n.gain),
            bias: cv(&n.bias),
        };
        let e = &self.embedder;
        MultiExitModel {
            config: self.config.clone(),
            mode: self.mode,
            embedder: Embedder {
                row_proj: e.row_proj.cast(),
                row_bias: cv(&e.row_bias),
                compass_proj: e.compass_proj.cast(),
                compass_bias: cv(&e.compass_bias),
                positions: e.positions.cast(),
                readout: cv(&e.readout),
            },
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: cn(&b.ln1),
                    wq: cl(&b.wq),
                    wk: cl(&b.wk),
                    wv: cl(&b.wv),
                    wo: cl(&b.wo),
                    ln2: cn(&b.ln2),
                    ff1: cl(&b.ff1),
                    ff2: cl(&b.ff2),
                })
                .collect(),
            exit_heads: self.exit_heads.iter().map(ch).collect(),
            final_head: ch(&self.final_head),
        }
    }

    /// Checks that `phase` is compatible with the model's mode.
    pub fn check_phase(&self, phase: TrainPhase) -> Result<()> {
        match (phase, self.mode) {
            (TrainPhase::Pretrain { .. }, ModelMode::FullPrecision) | (TrainPhase::Finetune, ModelMode::Quantized) => Ok(()),
            (TrainPhase::Pretrain { .. }, _) => Err(structural("pretraining needs a full-precision model")),
            (TrainPhase::Finetune, _) => Err(structural("fine-tuning needs a quantized model")),
        }
    }

    pub fn trainable_parameter_count(&self, phase: TrainPhase) -> usize {
        self.param_tensors(phase).iter().map(|(_, t)| t.len()).sum()
    }

    /// Adapter parameters only (`2·d·r` per adapted projection).
    pub fn lora_parameter_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.linears().into_iter().filter_map(|(_, l)| l.lora.as_ref()))
            .map(LoraAdapter::parameter_count)
            .sum()
    }

    pub fn prepare(&self) -> Result<Prepared<'_, F>> {
        Prepared::new(self)
    }
}

/// Expands to the named trainable tensors of a model, borrowed shared or
/// mutably. Order is fixed and identical for models of equal structure.
macro_rules! param_list {
    ($model:expr, $phase:expr, $data:ident, $slice:ident, $iter:ident, $($m:tt)?) => {{
        let phase: TrainPhase = $phase;
        let model = $model;
        let mut out = Vec::new();
        let e = & $($m)? model.embedder;
        out.push(("embed.row_proj".to_string(), e.row_proj.$data()));
        out.push(("embed.row_bias".to_string(), e.row_bias.$slice()));
        out.push(("embed.compass_proj".to_string(), e.compass_proj.$data()));
        out.push(("embed.compass_bias".to_string(), e.compass_bias.$slice()));
        out.push(("embed.positions".to_string(), e.positions.$data()));
        out.push(("embed.readout".to_string(), e.readout.$slice()));
        let pretrain = matches!(phase, TrainPhase::Pretrain { .. });
        for (l, b) in model.blocks.$iter().enumerate() {
            if pretrain {
                out.push((format!("blocks.{l}.ln1.gain"), b.ln1.gain.$slice()));
                out.push((format!("blocks.{l}.ln1.bias"), b.ln1.bias.$slice()));
                out.push((format!("blocks.{l}.ln2.gain"), b.ln2.gain.$slice()));
                out.push((format!("blocks.{l}.ln2.bias"), b.ln2.bias.$slice()));
            }
            let lins = [
                ("wq", & $($m)? b.wq),
                ("wk", & $($m)? b.wk),
                ("wv", & $($m)? b.wv),
                ("wo", & $($m)? b.wo),
                ("ff1", & $($m)? b.ff1),
                ("ff2", & $($m)? b.ff2),
            ];
            for (name, lin) in lins {
                if pretrain {
                    if let Weight::Dense(w) = & $($m)? lin.weight {
                        out.push((format!("blocks.{l}.{name}.weight"), w.$data()));
                    }
                    if let Some(bias) = & $($m)? lin.bias {
                        out.push((format!("blocks.{l}.{name}.bias"), bias.$slice()));
                    }
                }
                if let Some(ad) = & $($m)? lin.lora {
                    out.push((format!("blocks.{l}.{name}.lora_a"), ad.a.$data()));
                    out.push((format!("blocks.{l}.{name}.lora_b"), ad.b.$data()));
                }
            }
        }
        let with_exits = !matches!(phase, TrainPhase::Pretrain { exit_heads: false });
        let heads = model.exit_heads.$iter().enumerate().filter(|_| with_exits);
        for (i, h) in heads {
            out.push((format!("exits.{i}.w1"), h.w1.$data()));
            out.push((format!("exits.{i}.b1"), h.b1.$slice()));
            out.push((format!("exits.{i}.w2"), h.w2.$data()));
            out.push((format!("exits.{i}.b2"), h.b2.$slice()));
        }
        let h = & $($m)? model.final_head;
        out.push(("final.w1".to_string(), h.w1.$data()));
        out.push(("final.b1".to_string(), h.b1.$slice()));
        out.push(("final.w2".to_string(), h.w2.$data()));
        out.push(("final.b2".to_string(), h.b2.$slice()));
        out
    }};
}

impl<F: Scalar> MultiExitModel<F> {
    /// Named trainable tensors for `phase`, in a fixed order.
    pub fn param_tensors(&self, phase: TrainPhase) -> Vec<(String, &[F])> {
        param_list!(self, phase, data, as_slice, iter,)
    }

    pub fn param_tensors_mut(&mut self, phase: TrainPhase) -> Vec<(String, &mut [F])> {
        param_list!(self, phase, data_mut, as_mut_slice, iter_mut, mut)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            exit_layers: vec![4, 2],
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            exit_layers: vec![6],
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            num_heads: 5,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn lora_count_is_closed_form() {
        let cfg = ModelConfig::default();
        let model = MultiExitModel::<f32>::new(cfg.clone(), &mut Rng::new(0)).unwrap();
        let (q, _) = model.quantize(QuantizeOptions::default(), &mut Rng::new(1)).unwrap();
        let (d, r, l) = (cfg.d_model, cfg.lora_rank, cfg.num_layers);
        assert_eq!(q.lora_parameter_count(), 2 * l * 2 * d * r);
        let heads: usize = q.exit_heads.iter().map(|h| h.parameter_count()).sum::<usize>()
            + q.final_head.parameter_count();
        assert_eq!(
            q.trainable_parameter_count(TrainPhase::Finetune),
            2 * l * 2 * d * r + heads + q.embedder.parameter_count()
        );
    }

    #[test]
    fn quantizing_twice_is_rejected() {
        let model = MultiExitModel::<f32>::new(ModelConfig::default(), &mut Rng::new(0)).unwrap();
        let (q, report) = model.quantize(QuantizeOptions::default(), &mut Rng::new(1)).unwrap();
        assert_eq!(report.len(), 12);
        assert!(report.iter().all(|(_, e)| e.rel_frobenius > 0.0));
        assert!(q.quantize(QuantizeOptions::default(), &mut Rng::new(1)).is_err());
    }

    #[test]
    fn param_lists_align() {
        let model = MultiExitModel::<f32>::new(ModelConfig::default(), &mut Rng::new(0)).unwrap();
        let mut grads = model.zeros_like();
        for phase in [TrainPhase::Pretrain { exit_heads: true }, TrainPhase::Pretrain { exit_heads: false }] {
            let a: Vec<(String, usize)> = model.param_tensors(phase).iter().map(|(n, t)| (n.clone(), t.len())).collect();
            let b: Vec<(String, usize)> = grads.param_tensors_mut(phase).iter().map(|(n, t)| (n.clone(), t.len())).collect();
            assert_eq!(a, b);
        }
        assert!(model.param_tensors(TrainPhase::Pretrain { exit_heads: false }).len() < model.param_tensors(TrainPhase::Pretrain { exit_heads: true }).len());
    }
}
