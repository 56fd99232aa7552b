use crate::error::{structural, Result};
use crate::numerics::Rng;

use super::agent::{observe, step, Action, AgentState, Observation, DEFAULT_WINDOW};
use super::grid::{GridMap, Heading, Pos};

/// Environment settings shared by every episode of a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NavConfig {
    pub window_size: usize,
    /// Chebyshev radius in cells around the goal where STOP counts as success.
    pub success_radius: usize,
    pub max_steps: usize,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self {
            window_size: DEFAULT_WINDOW,
            success_radius: 1,
            max_steps: 200,
        }
    }
}

/// A start/goal pair on one map of an episode set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub map: usize,
    pub start: Pos,
    pub heading: Heading,
    pub goal: Pos,
}

/// Early-exit bookkeeping for one inference step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExitTrace {
    pub exit_layer: usize,
    pub entropy: f64,
    pub blocks_executed: usize,
    /// True when the step terminated at an intermediate layer.
    pub early: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub trace: Option<ExitTrace>,
}

/// Anything that picks an action each step.
pub trait Policy {
    fn act(&mut self, map: &GridMap, state: &AgentState, obs: &Observation) -> Result<Decision>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    StoppedSuccess,
    StoppedFailure,
    Timeout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub success: bool,
    /// Metres actually travelled.
    pub path_length: f64,
    /// Geodesic distance from the start to the success region, in metres.
    pub geodesic: f64,
    pub steps: usize,
    pub actions: Vec<Action>,
    pub traces: Vec<Option<ExitTrace>>,
    pub termination: Termination,
}

/// Geodesic distance field to the free cells of the goal's success region.
pub fn region_distances(map: &GridMap, goal: Pos, radius: usize) -> Vec<Option<u32>> {
    map.bfs_from(&map.success_region(goal, radius))
}

/// Runs observe → act → step until STOP or `max_steps`.
///
/// Success requires STOP while within the success radius of the goal.
pub fn run_episode<P: Policy>(policy: &mut P, map: &GridMap, spec: &EpisodeSpec, cfg: &NavConfig) -> Result<EpisodeRecord> {
    if !map.is_free(spec.start) || !map.is_free(spec.goal) {
        return Err(structural("episode start and goal must be free cells"));
    }
    if spec.start.chebyshev(spec.goal) <= cfg.success_radius {
        return Err(structural("episode starts inside the goal region"));
    }
    let field = region_distances(map, spec.goal, cfg.success_radius);
    let cells = map
        .distance_at(&field, spec.start)
        .ok_or_else(|| crate::error::data("goal region unreachable from start"))?;
    let geodesic = cells as f64 * map.cell_size();

    let mut state = AgentState::new(spec.start, spec.heading, spec.goal);
    let mut actions = Vec::new();
    let mut traces = Vec::new();
    let mut termination = Termination::Timeout;
    while state.steps_taken < cfg.max_steps {
        let obs = observe(map, &state, cfg.window_size)?;
        let decision = policy.act(map, &state, &obs)?;
        state = step(map, &state, decision.action)?;
        actions.push(decision.action);
        traces.push(decision.trace);
        if state.stopped {
            termination = if state.position.chebyshev(spec.goal) <= cfg.success_radius {
                Termination::StoppedSuccess
            } else {
                Termination::StoppedFailure
            };
            break;
        }
    }
    Ok(EpisodeRecord {
        success: termination == Termination::StoppedSuccess,
        path_length: state.distance_traveled,
        geodesic,
        steps: state.steps_taken,
        actions,
        traces,
        termination,
    })
}

/// Samples `count` episodes over the given maps: a random map, a random
/// free start outside the goal region, a random heading and a random goal.
pub fn sample_episodes(maps: &[GridMap], map_ids: &[usize], count: usize, radius: usize, rng: &mut Rng) -> Result<Vec<EpisodeSpec>> {
    if map_ids.is_empty() {
        return Err(structural("no maps to sample episodes from"));
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let map_id = map_ids[rng.below(map_ids.len())];
        let map = maps
            .get(map_id)
            .ok_or_else(|| structural(format!("map index {map_id} out of range")))?;
        let free = map.free_cells();
        let goal = free[rng.below(free.len())];
        let start = free[rng.below(free.len())];
        let heading = Heading::ALL[rng.below(4)];
        if start.chebyshev(goal) <= radius {
            if free.iter().all(|p| p.chebyshev(goal) <= radius) {
                return Err(crate::error::data(format!("map {map_id} is too small for radius {radius}")));
            }
            continue;
        }
        out.push(EpisodeSpec { map: map_id, start, heading, goal });
    }
    Ok(out)
}
