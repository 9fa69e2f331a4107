//! Deterministic Four Rooms gridworld.
//!
//! The world is a fixed 13x13 grid: four rooms behind a full wall
//! border, connected by exactly four single-cell hallways. Episodes are
//! parameterized by a goal cell; reward is 1 on entering the goal and 0
//! otherwise, and episodes cap at 1000 steps.

use std::collections::HashMap;

use rand::Rng;

use crate::tabular::OptionId;

/// Grid side length of the canonical layout.
pub const GRID_SIZE: usize = 13;

/// Episode step cap.
pub const MAX_STEPS: usize = 1000;

/// Canonical layout, one character per cell: 'w' = wall, ' ' = free.
pub const CANONICAL_LAYOUT: [&str; GRID_SIZE] = [
    "wwwwwwwwwwwww",
    "w     w     w",
    "w     w     w",
    "w           w",
    "w     w     w",
    "w     w     w",
    "ww wwww     w",
    "w     www www",
    "w     w     w",
    "w     w     w",
    "w           w",
    "w     w     w",
    "wwwwwwwwwwwww",
];

/// A cell position: `x` is the column, `y` is the row (0-based, row 0 on top).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridPos {
    pub x: usize,
    pub y: usize,
}

impl GridPos {
    pub fn new(x: usize, y: usize) -> Self {
        GridPos { x, y }
    }
}

impl std::fmt::Display for GridPos {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

/// One of the four primitive moves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActionId {
    Up,
    Down,
    Left,
    Right,
}

impl ActionId {
    pub const COUNT: usize = 4;
    pub const ALL: [ActionId; 4] = [ActionId::Up, ActionId::Down, ActionId::Left, ActionId::Right];

    pub fn index(self) -> usize {
        match self {
            ActionId::Up => 0,
            ActionId::Down => 1,
            ActionId::Left => 2,
            ActionId::Right => 3,
        }
    }

    pub fn from_index(i: usize) -> ActionId {
        Self::ALL[i]
    }

    /// (dx, dy) with row 0 at the top, so `Up` decreases `y`.
    pub fn delta(self) -> (i32, i32) {
        match self {
            ActionId::Up => (0, -1),
            ActionId::Down => (0, 1),
            ActionId::Left => (-1, 0),
            ActionId::Right => (1, 0),
        }
    }
}

/// One environment step as recorded in a transition history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub s: GridPos,
    pub o: OptionId,
    pub a: ActionId,
    pub r: f64,
    pub s_next: GridPos,
    /// True when the episode ended here: goal reached or step cap hit.
    pub done: bool,
}

/// The Four Rooms world: wall mask, current goal, and episode cap.
#[derive(Clone, Debug)]
pub struct FourRoomsWorld {
    pub width: usize,
    pub height: usize,
    walls: Vec<bool>,
    pub goal: GridPos,
    pub max_steps: usize,
}

/// The four rooms; hallway cells belong to none of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Room {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Room {
    pub const ALL: [Room; 4] = [
        Room::TopLeft,
        Room::TopRight,
        Room::BottomLeft,
        Room::BottomRight,
    ];
}

/// The four single-cell hallways of the canonical layout.
pub const HALLWAYS: [GridPos; 4] = [
    GridPos { x: 6, y: 3 },
    GridPos { x: 2, y: 6 },
    GridPos { x: 9, y: 7 },
    GridPos { x: 6, y: 10 },
];

impl FourRoomsWorld {
    /// Builds the canonical 13x13 world.
    ///
    /// The goal defaults to (9, 9); set it per episode with
    /// [`FourRoomsWorld::with_goal`].
    pub fn load_layout() -> Self {
        let mut walls = vec![false; GRID_SIZE * GRID_SIZE];
        for (y, row) in CANONICAL_LAYOUT.iter().enumerate() {
            assert_eq!(row.len(), GRID_SIZE, "layout row {y} has wrong length");
            for (x, c) in row.bytes().enumerate() {
                walls[y * GRID_SIZE + x] = c == b'w';
            }
        }
        FourRoomsWorld {
            width: GRID_SIZE,
            height: GRID_SIZE,
            walls,
            goal: GridPos::new(9, 9),
            max_steps: MAX_STEPS,
        }
    }

    /// Same world with a different goal cell.
    pub fn with_goal(mut self, goal: GridPos) -> Self {
        assert!(self.is_free(goal), "goal {goal} is a wall cell");
        self.goal = goal;
        self
    }

    pub fn is_wall(&self, pos: GridPos) -> bool {
        self.walls[pos.y * self.width + pos.x]
    }

    pub fn is_free(&self, pos: GridPos) -> bool {
        pos.x < self.width && pos.y < self.height && !self.is_wall(pos)
    }

    /// All free cells in row-major order (y outer, x inner).
    ///
    /// This fixed enumeration defines the state axis of every table and
    /// tensor built on top of the world.
    pub fn free_cells(&self) -> Vec<GridPos> {
        let mut cells = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let p = GridPos::new(x, y);
                if self.is_free(p) {
                    cells.push(p);
                }
            }
        }
        cells
    }

    /// Applies one move: the agent advances into the target cell if it
    /// is free and stays put otherwise. Reward 1 and done iff the
    /// resulting cell is the goal.
    ///
    /// Panics if `pos` is a wall cell (caller bug).
    pub fn step(&self, pos: GridPos, a: ActionId) -> (GridPos, f64, bool) {
        assert!(self.is_free(pos), "step from wall cell {pos}");
        let (dx, dy) = a.delta();
        let nx = pos.x as i32 + dx;
        let ny = pos.y as i32 + dy;
        let target = GridPos::new(nx as usize, ny as usize);
        // Border is all wall, so nx/ny stay in range for free `pos`.
        let next = if self.is_free(target) { target } else { pos };
        if next == self.goal {
            (next, 1.0, true)
        } else {
            (next, 0.0, false)
        }
    }

    /// Minimum number of legal moves from every free cell to `goal`.
    ///
    /// Panics if `goal` is a wall cell.
    pub fn bfs_distances(&self, goal: GridPos) -> HashMap<GridPos, usize> {
        assert!(self.is_free(goal), "bfs goal {goal} is a wall cell");
        let mut dist = HashMap::new();
        dist.insert(goal, 0usize);
        let mut frontier = std::collections::VecDeque::new();
        frontier.push_back(goal);
        while let Some(p) = frontier.pop_front() {
            let d = dist[&p];
            for a in ActionId::ALL {
                let (dx, dy) = a.delta();
                let q = GridPos::new((p.x as i32 + dx) as usize, (p.y as i32 + dy) as usize);
                if self.is_free(q) && !dist.contains_key(&q) {
                    dist.insert(q, d + 1);
                    frontier.push_back(q);
                }
            }
        }
        dist
    }

    /// Room of a free cell, or `None` for the four hallway cells.
    pub fn room_of(&self, pos: GridPos) -> Option<Room> {
        if !self.is_free(pos) || HALLWAYS.contains(&pos) {
            return None;
        }
        let left = pos.x < 6;
        if left {
            Some(if pos.y < 6 { Room::TopLeft } else { Room::BottomLeft })
        } else {
            // The right-side dividing wall sits one row lower than the left.
            Some(if pos.y < 7 { Room::TopRight } else { Room::BottomRight })
        }
    }

    /// Splits free cells into training-goal candidates (top-left,
    /// top-right, bottom-left rooms) and generalization-test candidates
    /// (bottom-right room). Hallways belong to neither set.
    pub fn goal_split(&self) -> (Vec<GridPos>, Vec<GridPos>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for p in self.free_cells() {
            match self.room_of(p) {
                Some(Room::BottomRight) => test.push(p),
                Some(_) => train.push(p),
                None => {}
            }
        }
        (train, test)
    }

    /// Uniform draw over free non-goal cells.
    pub fn sample_start<R: Rng>(&self, rng: &mut R) -> GridPos {
        loop {
            let x = rng.gen_range(0..self.width);
            let y = rng.gen_range(0..self.height);
            let p = GridPos::new(x, y);
            if self.is_free(p) && p != self.goal {
                return p;
            }
        }
    }

    /// Samples `n` distinct goals from the training rooms, cycling
    /// through the three rooms so the set stays spread out.
    pub fn sample_train_goals<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<GridPos> {
        let rooms = [Room::TopLeft, Room::TopRight, Room::BottomLeft];
        self.sample_goals_in(&rooms, n, rng)
    }

    /// Samples `n` distinct goals from the held-out bottom-right room.
    pub fn sample_test_goals<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<GridPos> {
        self.sample_goals_in(&[Room::BottomRight], n, rng)
    }

    fn sample_goals_in<R: Rng>(&self, rooms: &[Room], n: usize, rng: &mut R) -> Vec<GridPos> {
        let mut pools: Vec<Vec<GridPos>> = rooms
            .iter()
            .map(|room| {
                self.free_cells()
                    .into_iter()
                    .filter(|p| self.room_of(*p) == Some(*room))
                    .collect()
            })
            .collect();
        let mut goals = Vec::with_capacity(n);
        let mut i = 0;
        let n_pools = pools.len();
        while goals.len() < n {
            let pool = &mut pools[i % n_pools];
            i += 1;
            if pool.is_empty() {
                continue;
            }
            let k = rng.gen_range(0..pool.len());
            goals.push(pool.swap_remove(k));
        }
        goals
    }
}

/// Fixed enumeration of the free cells: bidirectional index <-> position map.
#[derive(Clone, Debug)]
pub struct StateSpace {
    cells: Vec<GridPos>,
    index: HashMap<GridPos, usize>,
}

impl StateSpace {
    pub fn new(world: &FourRoomsWorld) -> Self {
        let cells = world.free_cells();
        let index = cells.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        StateSpace { cells, index }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn index_of(&self, pos: GridPos) -> usize {
        self.index[&pos]
    }

    pub fn pos_of(&self, i: usize) -> GridPos {
        self.cells[i]
    }

    pub fn cells(&self) -> &[GridPos] {
        &self.cells
    }
}
