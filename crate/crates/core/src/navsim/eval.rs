use crate::error::{structural, Result};
use crate::model::{argmax_action, entropy, Prepared};
use crate::numerics::Scalar;

use super::agent::{Action, AgentState, Observation};
use super::episode::{run_episode, Decision, EpisodeRecord, EpisodeSpec, ExitTrace, NavConfig, Policy};
use super::grid::GridMap;
use super::metrics::{aggregate, Metrics, SweepTable};

/// Drives an agent with entropy-gated inference at a fixed threshold.
pub struct DeePolicy<'p, 'm, F: Scalar> {
    pub prepared: &'p Prepared<'m, F>,
    pub tau: f64,
}

impl<F: Scalar> Policy for DeePolicy<'_, '_, F> {
    fn act(&mut self, _: &GridMap, _: &AgentState, obs: &Observation) -> Result<Decision> {
        let out = self.prepared.dee_infer(obs, self.tau)?;
        Ok(Decision {
            action: out.action,
            trace: Some(ExitTrace {
                exit_layer: out.exit_layer,
                entropy: out.entropy,
                blocks_executed: out.blocks_executed,
                early: out.early,
            }),
        })
    }
}

fn map_for<'a>(maps: &'a [GridMap], spec: &EpisodeSpec) -> Result<&'a GridMap> {
    maps.get(spec.map)
        .ok_or_else(|| structural(format!("episode refers to missing map {}", spec.map)))
}

/// Runs every episode with `policy`, in order.
pub fn run_all<P: Policy>(policy: &mut P, maps: &[GridMap], episodes: &[EpisodeSpec], cfg: &NavConfig) -> Result<Vec<EpisodeRecord>> {
    episodes
        .iter()
        .map(|spec| run_episode(policy, map_for(maps, spec)?, spec, cfg))
        .collect()
}

/// Metrics of the early-exit policy at threshold `tau` (negative for full depth).
pub fn evaluate<F: Scalar>(prepared: &Prepared<F>, maps: &[GridMap], episodes: &[EpisodeSpec], tau: f64, cfg: &NavConfig) -> Result<Metrics> {
    let mut policy = DeePolicy { prepared, tau };
    aggregate(&run_all(&mut policy, maps, episodes, cfg)?)
}

/// Closed-loop evaluation at every threshold of `grid`.
pub fn sweep_tau<F: Scalar>(
    prepared: &Prepared<F>,
    maps: &[GridMap],
    episodes: &[EpisodeSpec],
    grid: &[f64],
    cfg: &NavConfig,
) -> Result<SweepTable> {
    let rows = grid
        .iter()
        .map(|&tau| Ok((tau, evaluate(prepared, maps, episodes, tau, cfg)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { rows })
}

/// Every head's verdict at one step of a full-depth rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordedStep {
    /// `(entropy, argmax)` of each exit head, in layer order.
    pub exits: Vec<(f64, Action)>,
    pub final_entropy: f64,
    pub final_action: Action,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordedTrajectory {
    pub record: EpisodeRecord,
    pub steps: Vec<RecordedStep>,
}

struct Recorder<'p, 'm, F: Scalar> {
    prepared: &'p Prepared<'m, F>,
    steps: Vec<RecordedStep>,
}

impl<F: Scalar> Policy for Recorder<'_, '_, F> {
    fn act(&mut self, _: &GridMap, _: &AgentState, obs: &Observation) -> Result<Decision> {
        let out = self.prepared.forward_full(obs)?;
        let exits = out
            .exit_probs
            .iter()
            .map(|p| Ok((entropy(p), argmax_action(p)?)))
            .collect::<Result<Vec<_>>>()?;
        let step = RecordedStep {
            exits,
            final_entropy: entropy(&out.final_probs),
            final_action: argmax_action(&out.final_probs)?,
        };
        let layers = self.prepared.model().config.num_layers;
        let decision = Decision {
            action: step.final_action,
            trace: Some(ExitTrace {
                exit_layer: layers,
                entropy: step.final_entropy,
                blocks_executed: layers,
                early: false,
            }),
        };
        self.steps.push(step);
        Ok(decision)
    }
}

/// Full-depth rollouts that also record what every exit head would have said.
pub fn record_trajectories<F: Scalar>(
    prepared: &Prepared<F>,
    maps: &[GridMap],
    episodes: &[EpisodeSpec],
    cfg: &NavConfig,
) -> Result<Vec<RecordedTrajectory>> {
    episodes
        .iter()
        .map(|spec| {
            let mut rec = Recorder {
                prepared,
                steps: Vec::new(),
            };
            let record = run_episode(&mut rec, map_for(maps, spec)?, spec, cfg)?;
            Ok(RecordedTrajectory { record, steps: rec.steps })
        })
        .collect()
}

/// Compute metrics the gate would have produced at `tau` on the recorded
/// (fixed) observation sequence. Navigation fields are those of the
/// recorded full-depth rollout.
pub fn rescore(trajectories: &[RecordedTrajectory], exit_layers: &[usize], num_layers: usize, tau: f64) -> Result<Metrics> {
    let mut records = Vec::with_capacity(trajectories.len());
    for t in trajectories {
        let mut record = t.record.clone();
        record.traces = t
            .steps
            .iter()
            .map(|s| {
                let hit = s.exits.iter().zip(exit_layers).find(|((h, _), _)| *h <= tau);
                Some(match hit {
                    Some(((h, _), &layer)) => ExitTrace {
                        exit_layer: layer,
                        entropy: *h,
                        blocks_executed: layer,
                        early: true,
                    },
                    None => ExitTrace {
                        exit_layer: num_layers,
                        entropy: s.final_entropy,
                        blocks_executed: num_layers,
                        early: false,
                    },
                })
            })
            .collect();
        records.push(record);
    }
    aggregate(&records)
}
