//! Central finite-difference check of [`backward`](super::backward).

use crate::error::Result;
use crate::model::{MultiExitModel, TrainPhase};
use crate::numerics::Rng;

use super::{backward, evaluate_dataset, Sample};

/// Agreement between analytic and numeric gradients on one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub coords: usize,
    pub analytic_norm: f64,
    /// `‖a − f‖ / max(‖a‖, ‖f‖)` over the checked coordinates, or 0 when
    /// both vectors vanish.
    pub rel_error: f64,
}

fn mean_loss(model: &MultiExitModel<f64>, batch: &[Sample], alphas: &[f64]) -> Result<f64> {
    let s = evaluate_dataset(model, batch, alphas)?;
    Ok(s.loss_sum / s.count as f64)
}

/// Compares analytic gradients of the batch-mean loss with central
/// differences of step `h` on up to `per_group` random coordinates of every
/// tensor trainable in `phase`.
pub fn finite_difference_check(
    model: &MultiExitModel<f64>,
    batch: &[Sample],
    alphas: &[f64],
    phase: TrainPhase,
    per_group: usize,
    h: f64,
    rng: &mut Rng,
) -> Result<Vec<GroupCheck>> {
    let loss_alphas = match phase {
        TrainPhase::Pretrain { exit_heads: false } => vec![0.0; alphas.len()],
        _ => alphas.to_vec(),
    };
    let (grads, _) = backward(model, batch, &loss_alphas)?;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .param_tensors(phase)
        .into_iter()
        .map(|(n, t)| (n, t.to_vec()))
        .collect();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(analytic.len());
    for (g, (name, a)) in analytic.iter().enumerate() {
        let mut idx: Vec<usize> = (0..a.len()).collect();
        rng.shuffle(&mut idx);
        idx.truncate(per_group);
        let (mut diff, mut an, mut fd) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let orig = probe.param_tensors(phase)[g].1[i];
            probe.param_tensors_mut(phase)[g].1[i] = orig + h;
            let up = mean_loss(&probe, batch, &loss_alphas)?;
            probe.param_tensors_mut(phase)[g].1[i] = orig - h;
            let down = mean_loss(&probe, batch, &loss_alphas)?;
            probe.param_tensors_mut(phase)[g].1[i] = orig;
            let f = (up - down) / (2.0 * h);
            diff += (a[i] - f).powi(2);
            an += a[i] * a[i];
            fd += f * f;
        }
        let denom = an.sqrt().max(fd.sqrt());
        out.push(GroupCheck {
            name: name.clone(),
            coords: idx.len(),
            analytic_norm: an.sqrt(),
            rel_error: if denom == 0.0 { 0.0 } else { diff.sqrt() / denom },
        });
    }
    Ok(out)
}
