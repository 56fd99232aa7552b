use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::error::{data, structural, Result};
use crate::numerics::Rng;

/// Metres covered by one FORWARD step.
pub const DEFAULT_CELL_SIZE: f64 = 0.25;

/// Cell coordinates; `x` is the column, `y` the row (growing downwards).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pos {
    pub x: usize,
    pub y: usize,
}

impl Pos {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn chebyshev(self, other: Pos) -> usize {
        self.x.abs_diff(other.x).max(self.y.abs_diff(other.y))
    }

    pub fn offset(self, dx: i64, dy: i64) -> Option<Pos> {
        let x = self.x as i64 + dx;
        let y = self.y as i64 + dy;
        (x >= 0 && y >= 0).then(|| Pos::new(x as usize, y as usize))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    /// Unit step `(dx, dy)` in world coordinates.
    pub fn forward(self) -> (i64, i64) {
        match self {
            Heading::North => (0, -1),
            Heading::East => (1, 0),
            Heading::South => (0, 1),
            Heading::West => (-1, 0),
        }
    }

    /// Unit step towards the agent's right hand.
    pub fn right(self) -> (i64, i64) {
        self.turn_right().forward()
    }

    pub fn turn_left(self) -> Heading {
        match self {
            Heading::North => Heading::West,
            Heading::West => Heading::South,
            Heading::South => Heading::East,
            Heading::East => Heading::North,
        }
    }

    pub fn turn_right(self) -> Heading {
        match self {
            Heading::North => Heading::East,
            Heading::East => Heading::South,
            Heading::South => Heading::West,
            Heading::West => Heading::North,
        }
    }
}

/// Bordered occupancy grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMap {
    width: usize,
    height: usize,
    walls: Vec<bool>,
    cell_size: f64,
    /// Optional markers read from or written to map files.
    pub start: Option<Pos>,
    pub goal: Option<Pos>,
}

impl GridMap {
    /// Validates a wall layout: every border cell is a wall and at least two
    /// cells are free.
    pub fn new(width: usize, height: usize, walls: Vec<bool>) -> Result<Self> {
        if walls.len() != width * height {
            return Err(structural(format!(
                "map {width}x{height} needs {} cells, got {}",
                width * height,
                walls.len()
            )));
        }
        let map = Self {
            width,
            height,
            walls,
            cell_size: DEFAULT_CELL_SIZE,
            start: None,
            goal: None,
        };
        for y in 0..height {
            for x in 0..width {
                let border = x == 0 || y == 0 || x + 1 == width || y + 1 == height;
                if border && !map.walls[y * width + x] {
                    return Err(data(format!("border cell ({x}, {y}) is not a wall")));
                }
            }
        }
        if map.free_cells().len() < 2 {
            return Err(data("map needs at least two free cells"));
        }
        Ok(map)
    }

    /// An empty bordered room.
    pub fn empty(width: usize, height: usize) -> Result<Self> {
        let walls = (0..width * height)
            .map(|i| {
                let (x, y) = (i % width, i / width);
                x == 0 || y == 0 || x + 1 == width || y + 1 == height
            })
            .collect();
        Self::new(width, height, walls)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn with_cell_size(mut self, cell_size: f64) -> Self {
        self.cell_size = cell_size;
        self
    }

    fn index(&self, p: Pos) -> usize {
        p.y * self.width + p.x
    }

    pub fn in_bounds(&self, p: Pos) -> bool {
        p.x < self.width && p.y < self.height
    }

    pub fn is_free(&self, p: Pos) -> bool {
        self.in_bounds(p) && !self.walls[self.index(p)]
    }

    pub fn free_cells(&self) -> Vec<Pos> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| Pos::new(x, y)))
            .filter(|&p| self.is_free(p))
            .collect()
    }

    fn set_wall(&mut self, p: Pos, wall: bool) {
        let i = self.index(p);
        self.walls[i] = wall;
    }

    pub fn neighbors(&self, p: Pos) -> impl Iterator<Item = Pos> + '_ {
        Heading::ALL.into_iter().filter_map(move |h| {
            let (dx, dy) = h.forward();
            p.offset(dx, dy).filter(|&q| self.is_free(q))
        })
    }

    /// Multi-source breadth-first distances in cells; `None` where unreachable.
    pub fn bfs_from(&self, sources: &[Pos]) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.width * self.height];
        let mut queue = VecDeque::new();
        for &s in sources {
            if self.is_free(s) && dist[self.index(s)].is_none() {
                dist[self.index(s)] = Some(0);
                queue.push_back(s);
            }
        }
        while let Some(p) = queue.pop_front() {
            let d = dist[self.index(p)].unwrap();
            for q in self.neighbors(p) {
                let qi = self.index(q);
                if dist[qi].is_none() {
                    dist[qi] = Some(d + 1);
                    queue.push_back(q);
                }
            }
        }
        dist
    }

    pub fn distance_at(&self, field: &[Option<u32>], p: Pos) -> Option<u32> {
        if self.in_bounds(p) {
            field[self.index(p)]
        } else {
            None
        }
    }

    pub fn component_count(&self) -> usize {
        let free = self.free_cells();
        let mut seen = vec![false; self.width * self.height];
        let mut count = 0;
        for &p in &free {
            if seen[self.index(p)] {
                continue;
            }
            count += 1;
            for (i, d) in self.bfs_from(&[p]).iter().enumerate() {
                if d.is_some() {
                    seen[i] = true;
                }
            }
        }
        count
    }

    /// Free cells within Chebyshev distance `radius` of `goal`.
    pub fn success_region(&self, goal: Pos, radius: usize) -> Vec<Pos> {
        self.free_cells()
            .into_iter()
            .filter(|p| p.chebyshev(goal) <= radius)
            .collect()
    }

    /// Parses `#` (wall), `.` (free), `S` and `G` (free with marker).
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        if rows.is_empty() {
            return Err(data("empty map file"));
        }
        let width = rows[0].chars().count();
        let mut walls = Vec::with_capacity(width * rows.len());
        let (mut start, mut goal) = (None, None);
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(data(format!("map row {y} has a different width")));
            }
            for (x, ch) in row.chars().enumerate() {
                match ch {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    'S' | 'G' => {
                        let slot = if ch == 'S' { &mut start } else { &mut goal };
                        if slot.replace(Pos::new(x, y)).is_some() {
                            return Err(data(format!("duplicate '{ch}' marker")));
                        }
                        walls.push(false);
                    }
                    other => return Err(data(format!("unexpected map character {other:?}"))),
                }
            }
        }
        let mut map = Self::new(width, rows.len(), walls)?;
        map.start = start;
        map.goal = goal;
        Ok(map)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = Pos::new(x, y);
                let ch = if Some(p) == self.start {
                    'S'
                } else if Some(p) == self.goal {
                    'G'
                } else if self.is_free(p) {
                    '.'
                } else {
                    '#'
                };
                out.push(ch);
            }
            let _ = writeln!(out);
        }
        out
    }
}

/// Geodesic distance in metres over the 4-neighbourhood.
pub fn shortest_path_len(map: &GridMap, a: Pos, b: Pos) -> Result<f64> {
    if !map.is_free(a) || !map.is_free(b) {
        return Err(structural("shortest path endpoints must be free cells"));
    }
    let field = map.bfs_from(&[a]);
    match map.distance_at(&field, b) {
        Some(d) => Ok(d as f64 * map.cell_size()),
        None => Err(data(format!("{b:?} is unreachable from {a:?}"))),
    }
}

pub const MAX_WALL_DENSITY: f64 = 0.4;

/// Bordered map with `density` of the interior turned into walls.
///
/// Candidate wall cells are visited in seeded random order; a candidate is
/// kept only if the free region stays a single connected component, so
/// every returned map is connected.
pub fn generate_map(seed: u64, width: usize, height: usize, density: f64) -> Result<GridMap> {
    if !(0.0..=MAX_WALL_DENSITY).contains(&density) {
        return Err(structural(format!(
            "wall density {density} outside [0, {MAX_WALL_DENSITY}]"
        )));
    }
    if width < 3 || height < 3 || (width - 2) * (height - 2) < 2 {
        return Err(structural(format!("map {width}x{height} has fewer than two interior cells")));
    }
    let mut map = GridMap::empty(width, height)?;
    let mut rng = Rng::derived(seed, "map");
    let mut interior = map.free_cells();
    let target = (density * interior.len() as f64).round() as usize;
    rng.shuffle(&mut interior);
    let mut placed = 0;
    let mut free_count = interior.len();
    for p in interior {
        if placed == target {
            break;
        }
        if free_count <= 2 {
            break;
        }
        map.set_wall(p, true);
        let free = map.free_cells();
        let reached = map.bfs_from(&free[..1]).iter().filter(|d| d.is_some()).count();
        if reached == free.len() {
            placed += 1;
            free_count -= 1;
        } else {
            map.set_wall(p, false);
        }
    }
    Ok(map)
}
