//! Grid-world point-goal navigation: maps, the agent, episodes and metrics.

mod agent;
mod episode;
mod eval;
mod grid;
mod metrics;

pub use agent::{observe, step, Action, AgentState, Observation, ACTION_COUNT, DEFAULT_WINDOW};
pub use episode::{
    region_distances, run_episode, sample_episodes, Decision, EpisodeRecord, EpisodeSpec, ExitTrace, NavConfig, Policy,
    Termination,
};
pub use eval::{evaluate, record_trajectories, rescore, run_all, sweep_tau, DeePolicy, RecordedStep, RecordedTrajectory};
pub use grid::{generate_map, shortest_path_len, GridMap, Heading, Pos, DEFAULT_CELL_SIZE, MAX_WALL_DENSITY};
pub use metrics::{aggregate, default_tau_grid, spl_term, Metrics, SweepTable, METRICS_CSV_HEADER};
