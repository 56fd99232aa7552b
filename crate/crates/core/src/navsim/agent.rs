use crate::error::{structural, Result};

use super::grid::{GridMap, Heading, Pos};

/// Discrete action set. Indices are the model's output classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Forward = 0,
    Left = 1,
    Right = 2,
    Stop = 3,
}

pub const ACTION_COUNT: usize = 4;

impl Action {
    pub const ALL: [Action; ACTION_COUNT] = [Action::Forward, Action::Left, Action::Right, Action::Stop];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| structural(format!("action index {i} out of range")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentState {
    pub position: Pos,
    pub heading: Heading,
    pub goal: Pos,
    pub steps_taken: usize,
    /// Metres moved by successful FORWARD steps.
    pub distance_traveled: f64,
    pub stopped: bool,
}

impl AgentState {
    pub fn new(position: Pos, heading: Heading, goal: Pos) -> Self {
        Self {
            position,
            heading,
            goal,
            steps_taken: 0,
            distance_traveled: 0.0,
            stopped: false,
        }
    }
}

/// Applies one action. A blocked FORWARD leaves the agent in place but
/// still costs a step.
pub fn step(map: &GridMap, state: &AgentState, action: Action) -> Result<AgentState> {
    if state.stopped {
        return Err(structural("action issued after the episode terminated"));
    }
    let mut next = state.clone();
    next.steps_taken += 1;
    match action {
        Action::Forward => {
            let (dx, dy) = state.heading.forward();
            if let Some(p) = state.position.offset(dx, dy).filter(|&p| map.is_free(p)) {
                next.position = p;
                next.distance_traveled += map.cell_size();
            }
        }
        Action::Left => next.heading = state.heading.turn_left(),
        Action::Right => next.heading = state.heading.turn_right(),
        Action::Stop => next.stopped = true,
    }
    Ok(next)
}

/// Egocentric view of the agent.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// `k×k` occupancy (1 = wall or out of bounds), row-major, row 0 farthest
    /// ahead; the agent sits at the centre cell facing up.
    pub window: Vec<u8>,
    pub window_size: usize,
    /// Goal displacement as (right, forward) in the agent frame, divided by
    /// the larger map dimension.
    pub goal_compass: [f32; 2],
    pub goal_visible: bool,
}

impl Observation {
    pub fn window_row(&self, i: usize) -> &[u8] {
        &self.window[i * self.window_size..(i + 1) * self.window_size]
    }
}

pub const DEFAULT_WINDOW: usize = 7;

pub fn observe(map: &GridMap, state: &AgentState, window_size: usize) -> Result<Observation> {
    if window_size == 0 || window_size % 2 == 0 {
        return Err(structural(format!("window size {window_size} must be odd")));
    }
    let c = (window_size / 2) as i64;
    let (fx, fy) = state.heading.forward();
    let (rx, ry) = state.heading.right();
    let mut window = Vec::with_capacity(window_size * window_size);
    for i in 0..window_size as i64 {
        for j in 0..window_size as i64 {
            let fwd = c - i;
            let right = j - c;
            let cell = state.position.offset(fwd * fx + right * rx, fwd * fy + right * ry);
            let free = cell.is_some_and(|p| map.is_free(p));
            window.push(if free { 0 } else { 1 });
        }
    }
    let dx = state.goal.x as i64 - state.position.x as i64;
    let dy = state.goal.y as i64 - state.position.y as i64;
    let fwd = dx * fx + dy * fy;
    let right = dx * rx + dy * ry;
    let norm = map.width().max(map.height()) as f32;
    Ok(Observation {
        window,
        window_size,
        goal_compass: [right as f32 / norm, fwd as f32 / norm],
        goal_visible: fwd.abs() <= c && right.abs() <= c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corridor() -> GridMap {
        GridMap::parse("#######\n#.....#\n#######\n").unwrap()
    }

    #[test]
    fn forward_into_wall_is_a_counted_noop() {
        let map = corridor();
        let s = AgentState::new(Pos::new(1, 1), Heading::North, Pos::new(5, 1));
        let n = step(&map, &s, Action::Forward).unwrap();
        assert_eq!(n.position, s.position);
        assert_eq!(n.steps_taken, 1);
        assert_eq!(n.distance_traveled, 0.0);
    }

    #[test]
    fn forward_in_corridor_moves_one_cell() {
        let map = corridor();
        let s = AgentState::new(Pos::new(1, 1), Heading::East, Pos::new(5, 1));
        let n = step(&map, &s, Action::Forward).unwrap();
        assert_eq!(n.position, Pos::new(2, 1));
        assert_eq!(n.distance_traveled, 0.25);
    }

    #[test]
    fn four_lefts_restore_heading() {
        let map = corridor();
        let mut s = AgentState::new(Pos::new(1, 1), Heading::South, Pos::new(5, 1));
        for _ in 0..4 {
            s = step(&map, &s, Action::Left).unwrap();
        }
        assert_eq!(s.heading, Heading::South);
        assert_eq!(s.steps_taken, 4);
    }

    #[test]
    fn no_action_after_stop() {
        let map = corridor();
        let s = AgentState::new(Pos::new(1, 1), Heading::East, Pos::new(5, 1));
        let s = step(&map, &s, Action::Stop).unwrap();
        assert!(step(&map, &s, Action::Left).is_err());
    }

    #[test]
    fn observation_is_egocentric() {
        let map = corridor();
        // Facing east along the corridor: the row straight ahead is open.
        let s = AgentState::new(Pos::new(2, 1), Heading::East, Pos::new(5, 1));
        let obs = observe(&map, &s, 3).unwrap();
        assert_eq!(obs.window, vec![1, 0, 1, 1, 0, 1, 1, 0, 1]);
        assert_eq!(obs.goal_compass, [0.0, 3.0 / 7.0]);
        assert!(!obs.goal_visible);
        let s = AgentState::new(Pos::new(2, 1), Heading::North, Pos::new(1, 1));
        let obs = observe(&map, &s, 3).unwrap();
        assert_eq!(obs.window, vec![1, 1, 1, 0, 0, 0, 1, 1, 1]);
        assert_eq!(obs.goal_compass, [-1.0 / 7.0, 0.0]);
        assert!(obs.goal_visible);
    }
}
