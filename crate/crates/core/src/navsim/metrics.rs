use std::fmt::Write as _;

use crate::error::{structural, Result};

use super::episode::EpisodeRecord;

/// Header of every metrics and sweep CSV.
pub const METRICS_CSV_HEADER: &str = "tau,sr,spl,exit_ratio,latency_proxy,mean_entropy_at_exit,n_episodes";

/// Aggregate navigation and compute metrics over an episode set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    /// Fraction of successful episodes.
    pub sr: f64,
    /// `(1/N) Σ S_i · L_min / max(L_i, L_min)`.
    pub spl: f64,
    /// Fraction of inference steps that exited at an intermediate layer.
    pub exit_ratio: f64,
    /// Mean transformer blocks executed per inference step.
    pub latency_proxy: f64,
    /// Mean entropy (nats) of the distribution that produced each action.
    pub mean_entropy_at_exit: f64,
    pub n_episodes: usize,
}

/// SPL contribution of one episode.
pub fn spl_term(success: bool, path_length: f64, geodesic: f64) -> f64 {
    if !success {
        return 0.0;
    }
    let denom = path_length.max(geodesic);
    if denom <= 0.0 {
        1.0
    } else {
        geodesic / denom
    }
}

pub fn aggregate(records: &[EpisodeRecord]) -> Result<Metrics> {
    if records.is_empty() {
        return Err(structural("cannot aggregate an empty episode set"));
    }
    let n = records.len() as f64;
    let mut successes = 0.0;
    let mut spl = 0.0;
    let mut steps = 0usize;
    let mut early = 0usize;
    let mut blocks = 0usize;
    let mut entropy_sum = 0.0;
    let mut entropy_count = 0usize;
    for rec in records {
        if rec.success {
            successes += 1.0;
        }
        spl += spl_term(rec.success, rec.path_length, rec.geodesic);
        steps += rec.traces.len();
        for t in rec.traces.iter().flatten() {
            blocks += t.blocks_executed;
            if t.early {
                early += 1;
            }
            entropy_sum += t.entropy;
            entropy_count += 1;
        }
    }
    let per_step = |v: f64| if steps == 0 { 0.0 } else { v / steps as f64 };
    Ok(Metrics {
        sr: successes / n,
        spl: spl / n,
        exit_ratio: per_step(early as f64),
        latency_proxy: per_step(blocks as f64),
        mean_entropy_at_exit: if entropy_count == 0 {
            0.0
        } else {
            entropy_sum / entropy_count as f64
        },
        n_episodes: records.len(),
    })
}

impl Metrics {
    /// One CSV row matching [`METRICS_CSV_HEADER`].
    pub fn csv_row(&self, tau: f64) -> String {
        format!(
            "{:.4},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            tau, self.sr, self.spl, self.exit_ratio, self.latency_proxy, self.mean_entropy_at_exit, self.n_episodes
        )
    }
}

/// Metrics for each threshold of a sweep, in grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<(f64, Metrics)>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{METRICS_CSV_HEADER}");
        for (tau, m) in &self.rows {
            let _ = writeln!(out, "{}", m.csv_row(*tau));
        }
        out
    }

    pub fn get(&self, tau: f64) -> Option<&Metrics> {
        self.rows.iter().find(|(t, _)| (t - tau).abs() < 1e-9).map(|(_, m)| m)
    }
}

/// `0.05, 0.10, …, 0.95`.
pub fn default_tau_grid() -> Vec<f64> {
    (1..=19).map(|i| (i as f64 * 0.05 * 100.0).round() / 100.0).collect()
}
