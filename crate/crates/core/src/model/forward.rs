use crate::error::{numerical, structural, Result};
use crate::navsim::{Action, Observation};
use crate::numerics::{gemm_acc, gelu, layer_norm_into, matvec, relu, softmax_raw, Matrix, ProbVector, Scalar};

use super::{ExitHead, Linear, MultiExitModel};

pub(crate) const Q: usize = 0;
pub(crate) const K: usize = 1;
pub(crate) const V: usize = 2;
pub(crate) const O: usize = 3;
pub(crate) const FF1: usize = 4;
pub(crate) const FF2: usize = 5;

/// An effective weight in both layouts: `w` is `out×in`, `wt` is `in×out`.
pub(crate) struct Dual<F> {
    pub w: Matrix<F>,
    pub wt: Matrix<F>,
    pub bias: Option<Vec<F>>,
}

impl<F: Scalar> Dual<F> {
    fn new(lin: &Linear<F>) -> Result<Self> {
        let w = lin.effective()?;
        Ok(Self {
            wt: w.transpose(),
            w,
            bias: lin.bias.clone(),
        })
    }

    /// `Y = X Wᵀ + b` for a row-major token matrix `X: n×in`.
    pub fn apply(&self, x: &Matrix<F>) -> Matrix<F> {
        let (d_in, d_out) = self.wt.shape();
        let n = x.rows();
        let mut y = Matrix::zeros(n, d_out);
        gemm_acc(n, d_in, d_out, x.data(), self.wt.data(), y.data_mut());
        if let Some(b) = &self.bias {
            for i in 0..n {
                for (v, &bj) in y.row_mut(i).iter_mut().zip(b) {
                    *v += bj;
                }
            }
        }
        y
    }
}

/// Intermediates of one block, kept for backpropagation.
pub(crate) struct BlockCache<F> {
    pub x_in: Matrix<F>,
    pub xhat1: Matrix<F>,
    pub inv1: Vec<F>,
    pub h1: Matrix<F>,
    pub q: Matrix<F>,
    pub k: Matrix<F>,
    pub v: Matrix<F>,
    /// Attention probabilities, `heads × n × n`.
    pub probs: Vec<F>,
    pub attn: Matrix<F>,
    pub xhat2: Matrix<F>,
    pub inv2: Vec<F>,
    pub h2: Matrix<F>,
    pub u: Matrix<F>,
    pub g: Matrix<F>,
    pub x_out: Matrix<F>,
}

pub(crate) struct HeadCache<F> {
    pub z: Vec<F>,
    pub hpre: Vec<F>,
    pub h: Vec<F>,
    pub probs: Vec<F>,
}

/// Output of a complete forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FullForward<F: Scalar = f32> {
    /// One distribution per exit head, in layer order.
    pub exit_probs: Vec<ProbVector<F>>,
    pub final_probs: ProbVector<F>,
    /// Readout embedding `z_l` after each block.
    pub readouts: Vec<Vec<F>>,
}

/// Result of entropy-gated inference for one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct DeeOutcome<F: Scalar = f32> {
    pub action: Action,
    /// 1-based layer whose head produced the action.
    pub exit_layer: usize,
    pub probs: ProbVector<F>,
    pub entropy: f64,
    pub blocks_executed: usize,
    pub early: bool,
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy<F: Scalar>(p: &ProbVector<F>) -> f64 {
    -p.as_slice()
        .iter()
        .map(|v| v.as_f64())
        .filter(|&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// Highest-probability action; ties go to the smallest index.
pub fn argmax_action<F: Scalar>(p: &ProbVector<F>) -> Result<Action> {
    let mut best = 0;
    for (i, &v) in p.as_slice().iter().enumerate() {
        if v > p.as_slice()[best] {
            best = i;
        }
    }
    Action::from_index(best)
}

pub(crate) fn head_forward<F: Scalar>(head: &ExitHead<F>, z: &[F]) -> Result<HeadCache<F>> {
    let mut hpre = matvec(&head.w1, z);
    for (v, &b) in hpre.iter_mut().zip(&head.b1) {
        *v += b;
    }
    let h: Vec<F> = hpre.iter().map(|&v| relu(v)).collect();
    let mut logits = matvec(&head.w2, &h);
    for (v, &b) in logits.iter_mut().zip(&head.b2) {
        *v += b;
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(numerical("non-finite logits"));
    }
    Ok(HeadCache {
        z: z.to_vec(),
        hpre,
        h,
        probs: softmax_raw(&logits),
    })
}

/// Applies a classification head to a readout embedding.
pub fn exit_head_forward<F: Scalar>(head: &ExitHead<F>, z: &[F]) -> Result<ProbVector<F>> {
    if z.len() != head.w1.cols() {
        return Err(structural(format!("readout has {} entries, head expects {}", z.len(), head.w1.cols())));
    }
    Ok(ProbVector::from_vec_unchecked(head_forward(head, z)?.probs))
}

/// A model with its effective block weights materialized once, ready for
/// repeated forward passes.
pub struct Prepared<'m, F: Scalar = f32> {
    pub(crate) model: &'m MultiExitModel<F>,
    pub(crate) layers: Vec<[Dual<F>; 6]>,
}

impl<'m, F: Scalar> Prepared<'m, F> {
    pub fn new(model: &'m MultiExitModel<F>) -> Result<Self> {
        let layers = model
            .blocks
            .iter()
            .map(|b| {
                Ok([
                    Dual::new(&b.wq)?,
                    Dual::new(&b.wk)?,
                    Dual::new(&b.wv)?,
                    Dual::new(&b.wo)?,
                    Dual::new(&b.ff1)?,
                    Dual::new(&b.ff2)?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { model, layers })
    }

    pub fn model(&self) -> &'m MultiExitModel<F> {
        self.model
    }

    /// Token matrix `(window + 2) × d` for an observation.
    pub fn encode_observation(&self, obs: &Observation) -> Result<Matrix<F>> {
        let cfg = &self.model.config;
        let k = cfg.window;
        if obs.window_size != k || obs.window.len() != k * k {
            return Err(structural(format!(
                "observation window {} does not match model window {k}",
                obs.window_size
            )));
        }
        let e = &self.model.embedder;
        let d = cfg.d_model;
        let mut x = Matrix::zeros(cfg.seq_len(), d);
        x.row_mut(0).copy_from_slice(&e.readout);
        for i in 0..k {
            let row: Vec<F> = obs.window_row(i).iter().map(|&c| F::of(c as f64)).collect();
            let t = matvec(&e.row_proj, &row);
            for (j, v) in x.row_mut(i + 1).iter_mut().enumerate() {
                *v = t[j] + e.row_bias[j];
            }
        }
        let t = matvec(&e.compass_proj, &compass_features(obs));
        for (j, v) in x.row_mut(k + 1).iter_mut().enumerate() {
            *v = t[j] + e.compass_bias[j];
        }
        for i in 0..cfg.seq_len() {
            let pos = e.positions.row(i);
            for (v, &p) in x.row_mut(i).iter_mut().zip(pos) {
                *v += p;
            }
        }
        Ok(x)
    }

    /// Runs block `layer` (0-based) on `x`.
    pub(crate) fn block_forward(&self, layer: usize, x: Matrix<F>) -> Result<BlockCache<F>> {
        let cfg = &self.model.config;
        let block = &self.model.blocks[layer];
        let w = &self.layers[layer];
        let (n, d) = x.shape();
        let (heads, hd) = (cfg.num_heads, cfg.head_dim());

        let mut xhat1 = Matrix::zeros(n, d);
        let mut h1 = Matrix::zeros(n, d);
        let mut inv1 = Vec::with_capacity(n);
        for i in 0..n {
            inv1.push(layer_norm_into(
                x.row(i),
                &block.ln1.gain,
                &block.ln1.bias,
                h1.row_mut(i),
                Some(xhat1.row_mut(i)),
            ));
        }
        let q = w[Q].apply(&h1);
        let k = w[K].apply(&h1);
        let v = w[V].apply(&h1);

        let scale = F::of(1.0 / (hd as f64).sqrt());
        let mut probs = vec![F::zero(); heads * n * n];
        let mut attn = Matrix::zeros(n, d);
        let mut scores = vec![F::zero(); n];
        for h in 0..heads {
            let c0 = h * hd;
            for i in 0..n {
                let qi = &q.row(i)[c0..c0 + hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &k.row(j)[c0..c0 + hd];
                    let mut acc = F::zero();
                    for c in 0..hd {
                        acc += qi[c] * kj[c];
                    }
                    *s = acc * scale;
                }
                let p = softmax_raw(&scores);
                let out = &mut attn.row_mut(i)[c0..c0 + hd];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &v.row(j)[c0..c0 + hd];
                    for c in 0..hd {
                        out[c] += pj * vj[c];
                    }
                }
                probs[(h * n + i) * n..(h * n + i + 1) * n].copy_from_slice(&p);
            }
        }
        let o = w[O].apply(&attn);
        let mut x_mid = x.clone();
        for (a, &b) in x_mid.data_mut().iter_mut().zip(o.data()) {
            *a += b;
        }

        let mut xhat2 = Matrix::zeros(n, d);
        let mut h2 = Matrix::zeros(n, d);
        let mut inv2 = Vec::with_capacity(n);
        for i in 0..n {
            inv2.push(layer_norm_into(
                x_mid.row(i),
                &block.ln2.gain,
                &block.ln2.bias,
                h2.row_mut(i),
                Some(xhat2.row_mut(i)),
            ));
        }
        let u = w[FF1].apply(&h2);
        let g = u.map(gelu);
        let f = w[FF2].apply(&g);
        let mut x_out = x_mid;
        for (a, &b) in x_out.data_mut().iter_mut().zip(f.data()) {
            *a += b;
        }
        if !x_out.is_finite() {
            return Err(numerical(format!("non-finite activations after layer {}", layer + 1)));
        }
        Ok(BlockCache {
            x_in: x,
            xhat1,
            inv1,
            h1,
            q,
            k,
            v,
            probs,
            attn,
            xhat2,
            inv2,
            h2,
            u,
            g,
            x_out,
        })
    }

    /// Forward through every block, keeping all intermediates.
    pub(crate) fn forward_cached(&self, obs: &Observation) -> Result<Vec<BlockCache<F>>> {
        let mut x = self.encode_observation(obs)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let c = self.block_forward(l, x)?;
            x = c.x_out.clone();
            caches.push(c);
        }
        Ok(caches)
    }

    /// All exit distributions and the final distribution.
    pub fn forward_full(&self, obs: &Observation) -> Result<FullForward<F>> {
        let cfg = &self.model.config;
        let mut x = self.encode_observation(obs)?;
        let mut readouts = Vec::with_capacity(cfg.num_layers);
        let mut exit_probs = Vec::with_capacity(cfg.exit_layers.len());
        for l in 0..cfg.num_layers {
            x = self.block_forward(l, x)?.x_out;
            let z = x.row(0).to_vec();
            if let Some(e) = cfg.exit_index(l + 1) {
                exit_probs.push(exit_head_forward(&self.model.exit_heads[e], &z)?);
            }
            readouts.push(z);
        }
        let final_probs = exit_head_forward(&self.model.final_head, &readouts[cfg.num_layers - 1])?;
        Ok(FullForward {
            exit_probs,
            final_probs,
            readouts,
        })
    }

    /// Entropy-gated inference: stops at the first exit layer whose head
    /// entropy is at most `tau`, otherwise runs to the final layer. Any
    /// negative `tau` forces full depth.
    pub fn dee_infer(&self, obs: &Observation, tau: f64) -> Result<DeeOutcome<F>> {
        if tau.is_nan() {
            return Err(structural("threshold is NaN"));
        }
        let cfg = &self.model.config;
        let mut x = self.encode_observation(obs)?;
        for l in 0..cfg.num_layers {
            x = self.block_forward(l, x)?.x_out;
            let layer = l + 1;
            if let Some(e) = cfg.exit_index(layer) {
                let probs = exit_head_forward(&self.model.exit_heads[e], x.row(0))?;
                let h = entropy(&probs);
                if h <= tau {
                    return Ok(DeeOutcome {
                        action: argmax_action(&probs)?,
                        exit_layer: layer,
                        entropy: h,
                        probs,
                        blocks_executed: layer,
                        early: true,
                    });
                }
            }
        }
        let probs = exit_head_forward(&self.model.final_head, x.row(0))?;
        Ok(DeeOutcome {
            action: argmax_action(&probs)?,
            exit_layer: cfg.num_layers,
            entropy: entropy(&probs),
            probs,
            blocks_executed: cfg.num_layers,
            early: false,
        })
    }
}

pub(crate) fn compass_features<F: Scalar>(obs: &Observation) -> [F; 3] {
    [
        F::of_f32(obs.goal_compass[0]),
        F::of_f32(obs.goal_compass[1]),
        if obs.goal_visible { F::one() } else { F::zero() },
    ]
}

impl<F: Scalar> MultiExitModel<F> {
    /// One-off forward pass. Prefer [`Prepared`] for repeated calls.
    pub fn forward_full(&self, obs: &Observation) -> Result<FullForward<F>> {
        self.prepare()?.forward_full(obs)
    }

    /// One-off early-exit inference. Prefer [`Prepared`] for repeated calls.
    pub fn dee_infer(&self, obs: &Observation, tau: f64) -> Result<DeeOutcome<F>> {
        self.prepare()?.dee_infer(obs, tau)
    }
}
