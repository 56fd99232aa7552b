//! Analytic gradients of the multi-exit loss.

use crate::error::{structural, Result};
use crate::model::{ExitHead, LayerNormParams, MultiExitModel, Prepared, Weight};
use crate::model::forward::{compass_features, head_forward, BlockCache, HeadCache, FF1, FF2, K, O, Q, V};
use crate::numerics::{gelu_grad, gemm_acc, Matrix, Scalar};

use super::{cross_entropy, Sample};

/// Loss and accuracy counts accumulated over a batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub loss_sum: f64,
    pub exit_correct: Vec<usize>,
    pub final_correct: usize,
    pub count: usize,
}

impl BatchStats {
    pub fn merge(&mut self, other: &BatchStats) {
        if self.exit_correct.len() < other.exit_correct.len() {
            self.exit_correct.resize(other.exit_correct.len(), 0);
        }
        self.loss_sum += other.loss_sum;
        for (a, b) in self.exit_correct.iter_mut().zip(&other.exit_correct) {
            *a += b;
        }
        self.final_correct += other.final_correct;
        self.count += other.count;
    }
}

fn argmax<F: Scalar>(p: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Gradient of the batch-mean loss `L_final + Σ_k α_k L_exit,k` with
/// respect to every parameter of `model`, in model shape. Quantized bases
/// receive no gradient; adapters receive theirs through the effective weight.
pub fn backward<F: Scalar>(model: &MultiExitModel<F>, batch: &[Sample], alphas: &[f64]) -> Result<(MultiExitModel<F>, BatchStats)> {
    let cfg = &model.config;
    if batch.is_empty() {
        return Err(structural("empty batch"));
    }
    if alphas.len() != cfg.exit_layers.len() {
        return Err(structural(format!(
            "{} exit weights for {} exit heads",
            alphas.len(),
            cfg.exit_layers.len()
        )));
    }
    let prepared = model.prepare()?;
    let mut grads = model.zeros_like();
    let mut eff: Vec<[Matrix<F>; 6]> = prepared
        .layers
        .iter()
        .map(|ws| std::array::from_fn(|i| Matrix::zeros(ws[i].wt.rows(), ws[i].wt.cols())))
        .collect();
    let inv_b = 1.0 / batch.len() as f64;
    let mut stats = BatchStats {
        exit_correct: vec![0; cfg.exit_layers.len()],
        ..BatchStats::default()
    };
    let big_l = cfg.num_layers;

    for sample in batch {
        let gt = sample.action.index();
        let caches = prepared.forward_cached(&sample.obs)?;
        let exit_caches = cfg
            .exit_layers
            .iter()
            .zip(&model.exit_heads)
            .map(|(&l, h)| head_forward(h, caches[l - 1].x_out.row(0)))
            .collect::<Result<Vec<_>>>()?;
        let final_cache = head_forward(&model.final_head, caches[big_l - 1].x_out.row(0))?;

        let mut loss = cross_entropy(final_cache.probs[gt].as_f64());
        for (e, hc) in exit_caches.iter().enumerate() {
            loss += alphas[e] * cross_entropy(hc.probs[gt].as_f64());
            if argmax(&hc.probs) == gt {
                stats.exit_correct[e] += 1;
            }
        }
        if argmax(&final_cache.probs) == gt {
            stats.final_correct += 1;
        }
        stats.loss_sum += loss;
        stats.count += 1;

        let (n, d) = caches[0].x_in.shape();
        let mut dx = Matrix::zeros(n, d);
        for l in (0..big_l).rev() {
            let layer = l + 1;
            if layer == big_l {
                let dz = head_backward(&model.final_head, &final_cache, gt, F::of(inv_b), &mut grads.final_head);
                add_into(dx.row_mut(0), &dz);
            }
            if let Some(e) = cfg.exit_index(layer) {
                if alphas[e] != 0.0 {
                    let w = F::of(alphas[e] * inv_b);
                    let dz = head_backward(&model.exit_heads[e], &exit_caches[e], gt, w, &mut grads.exit_heads[e]);
                    add_into(dx.row_mut(0), &dz);
                }
            }
            dx = block_backward(&prepared, l, &caches[l], dx, &mut eff[l], &mut grads);
        }
        embed_backward(model, sample, &dx, &mut grads);
    }

    for (l, layer_eff) in eff.into_iter().enumerate() {
        let src = model.blocks[l].linears();
        for ((_, glin), ((_, mlin), dwt)) in grads.blocks[l].linears_mut().into_iter().zip(src.into_iter().zip(layer_eff)) {
            let dw = dwt.transpose();
            if let (Some(g), Some(ad)) = (glin.lora.as_mut(), mlin.lora.as_ref()) {
                let s = ad.scaling();
                g.b = dw.matmul(&ad.a.transpose())?.scale(s);
                g.a = ad.b.transpose().matmul(&dw)?.scale(s);
            }
            if let Weight::Dense(m) = &mut glin.weight {
                *m = dw;
            }
        }
    }
    Ok((grads, stats))
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Accumulates head gradients for a cross-entropy term of weight `w`;
/// returns the gradient with respect to the readout embedding.
fn head_backward<F: Scalar>(head: &ExitHead<F>, c: &HeadCache<F>, gt: usize, w: F, g: &mut ExitHead<F>) -> Vec<F> {
    let d = c.z.len();
    if c.probs[gt].as_f64() < super::PROB_FLOOR {
        // The loss is clamped here, so it is locally constant.
        return vec![F::zero(); d];
    }
    let dlogits: Vec<F> = c
        .probs
        .iter()
        .enumerate()
        .map(|(j, &p)| w * if j == gt { p - F::one() } else { p })
        .collect();
    let hidden = c.h.len();
    let mut dh = vec![F::zero(); hidden];
    for (j, &dl) in dlogits.iter().enumerate() {
        g.b2[j] += dl;
        let g_row = g.w2.row_mut(j);
        for i in 0..hidden {
            g_row[i] += dl * c.h[i];
        }
        let w_row = head.w2.row(j);
        for i in 0..hidden {
            dh[i] += w_row[i] * dl;
        }
    }
    let mut dz = vec![F::zero(); d];
    for i in 0..hidden {
        if c.hpre[i] <= F::zero() {
            continue;
        }
        let dhp = dh[i];
        g.b1[i] += dhp;
        let g_row = g.w1.row_mut(i);
        for k in 0..d {
            g_row[k] += dhp * c.z[k];
        }
        let w_row = head.w1.row(i);
        for k in 0..d {
            dz[k] += w_row[k] * dhp;
        }
    }
    dz
}

/// `Y = X Wᵀ + b`: accumulates `dWᵀ += Xᵀ dY` and `db`, returns `dX = dY W`.
fn linear_backward<F: Scalar>(x: &Matrix<F>, dy: &Matrix<F>, w: &Matrix<F>, dwt: &mut Matrix<F>, dbias: Option<&mut [F]>) -> Matrix<F> {
    let (n, d_in) = x.shape();
    let d_out = dy.cols();
    gemm_acc(d_in, n, d_out, x.transpose().data(), dy.data(), dwt.data_mut());
    if let Some(db) = dbias {
        for i in 0..n {
            add_into(db, dy.row(i));
        }
    }
    let mut dx = Matrix::zeros(n, d_in);
    gemm_acc(n, d_out, d_in, dy.data(), w.data(), dx.data_mut());
    dx
}

fn layer_norm_backward<F: Scalar>(dy: &Matrix<F>, xhat: &Matrix<F>, inv: &[F], params: &LayerNormParams<F>, g: &mut LayerNormParams<F>) -> Matrix<F> {
    let (n, d) = dy.shape();
    let dn = F::of(d as f64);
    let mut dx = Matrix::zeros(n, d);
    let mut dxhat = vec![F::zero(); d];
    for i in 0..n {
        let (dyr, xr) = (dy.row(i), xhat.row(i));
        let mut mean_a = F::zero();
        let mut mean_b = F::zero();
        for j in 0..d {
            g.gain[j] += dyr[j] * xr[j];
            g.bias[j] += dyr[j];
            dxhat[j] = dyr[j] * params.gain[j];
            mean_a += dxhat[j];
            mean_b += dxhat[j] * xr[j];
        }
        mean_a = mean_a / dn;
        mean_b = mean_b / dn;
        for (j, v) in dx.row_mut(i).iter_mut().enumerate() {
            *v = inv[i] * (dxhat[j] - mean_a - xr[j] * mean_b);
        }
    }
    dx
}

fn block_backward<F: Scalar>(
    prepared: &Prepared<F>,
    l: usize,
    c: &BlockCache<F>,
    dy: Matrix<F>,
    eff: &mut [Matrix<F>; 6],
    grads: &mut MultiExitModel<F>,
) -> Matrix<F> {
    let cfg = &prepared.model.config;
    let params = &prepared.model.blocks[l];
    let w = &prepared.layers[l];
    let g = &mut grads.blocks[l];

    let dg = linear_backward(&c.g, &dy, &w[FF2].w, &mut eff[FF2], g.ff2.bias.as_deref_mut());
    let mut du = dg;
    for (v, &u) in du.data_mut().iter_mut().zip(c.u.data()) {
        *v *= gelu_grad(u);
    }
    let dh2 = linear_backward(&c.h2, &du, &w[FF1].w, &mut eff[FF1], g.ff1.bias.as_deref_mut());
    let mut dx_mid = dy;
    let d_ln2 = layer_norm_backward(&dh2, &c.xhat2, &c.inv2, &params.ln2, &mut g.ln2);
    add_into(dx_mid.data_mut(), d_ln2.data());

    let dattn = linear_backward(&c.attn, &dx_mid, &w[O].w, &mut eff[O], None);
    let (n, d) = dattn.shape();
    let (heads, hd) = (cfg.num_heads, cfg.head_dim());
    let scale = F::of(1.0 / (hd as f64).sqrt());
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    let mut dp = vec![F::zero(); n];
    for h in 0..heads {
        let c0 = h * hd;
        for i in 0..n {
            let p = &c.probs[(h * n + i) * n..(h * n + i + 1) * n];
            let doi = &dattn.row(i)[c0..c0 + hd];
            let mut weighted = F::zero();
            for j in 0..n {
                let vj = &c.v.row(j)[c0..c0 + hd];
                let mut acc = F::zero();
                for t in 0..hd {
                    acc += doi[t] * vj[t];
                }
                dp[j] = acc;
                weighted += acc * p[j];
                let dvj = &mut dv.row_mut(j)[c0..c0 + hd];
                for t in 0..hd {
                    dvj[t] += p[j] * doi[t];
                }
            }
            for j in 0..n {
                let ds = p[j] * (dp[j] - weighted) * scale;
                let kj = &c.k.row(j)[c0..c0 + hd];
                let dqi = &mut dq.row_mut(i)[c0..c0 + hd];
                for t in 0..hd {
                    dqi[t] += ds * kj[t];
                }
                let qi = &c.q.row(i)[c0..c0 + hd];
                let dkj = &mut dk.row_mut(j)[c0..c0 + hd];
                for t in 0..hd {
                    dkj[t] += ds * qi[t];
                }
            }
        }
    }
    let mut dh1 = linear_backward(&c.h1, &dq, &w[Q].w, &mut eff[Q], None);
    add_into(dh1.data_mut(), linear_backward(&c.h1, &dk, &w[K].w, &mut eff[K], None).data());
    add_into(dh1.data_mut(), linear_backward(&c.h1, &dv, &w[V].w, &mut eff[V], None).data());
    let d_ln1 = layer_norm_backward(&dh1, &c.xhat1, &c.inv1, &params.ln1, &mut g.ln1);
    let mut dx_in = dx_mid;
    add_into(dx_in.data_mut(), d_ln1.data());
    dx_in
}

fn embed_backward<F: Scalar>(model: &MultiExitModel<F>, sample: &Sample, dx: &Matrix<F>, grads: &mut MultiExitModel<F>) {
    let k = model.config.window;
    let g = &mut grads.embedder;
    add_into(&mut g.readout, dx.row(0));
    add_into(g.positions.data_mut(), dx.data());
    for i in 0..k {
        let row = sample.obs.window_row(i);
        let dt = dx.row(i + 1);
        add_into(&mut g.row_bias, dt);
        for (j, &dtj) in dt.iter().enumerate() {
            let g_row = g.row_proj.row_mut(j);
            for (c, &cell) in row.iter().enumerate() {
                if cell != 0 {
                    g_row[c] += dtj * F::of(cell as f64);
                }
            }
        }
    }
    let feats: [F; 3] = compass_features(&sample.obs);
    let dt = dx.row(k + 1);
    add_into(&mut g.compass_bias, dt);
    for (j, &dtj) in dt.iter().enumerate() {
        let g_row = g.compass_proj.row_mut(j);
        for (c, &f) in feats.iter().enumerate() {
            g_row[c] += dtj * f;
        }
    }
}
