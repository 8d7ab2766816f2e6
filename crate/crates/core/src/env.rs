//! Deterministic grid environments and scripted demonstrators.
//!
//! * `chain-dense`: a 1-D corridor of 51 cells. Every step onto a cell never
//!   reached before pays +1; the episode ends at cell 50 or after 50 steps.
//! * `grid-maze-sparse`: a 15x15 walled maze carved by seeded recursive
//!   backtracking. Each episode starts in a random open cell and the goal is
//!   the open cell farthest (by path length) from the start. Reward is 1 on
//!   entering the goal, 0 otherwise; horizon 150.
//! * `kitchen-lite`: a 7x7 open grid with four waypoints that must be visited
//!   in order; +1 when the next required waypoint is first reached; horizon
//!   200.
//!
//! Observations contain the agent position only. The maze goal and the
//! kitchen stage counter are part of the hidden world state.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetMeta, Trajectory};
use crate::error::{Error, Result};
use crate::seed;

pub const CHAIN_LENGTH: i32 = 50;
pub const MAZE_SIZE: usize = 15;
pub const KITCHEN_SIZE: i32 = 7;
pub const KITCHEN_WAYPOINTS: [[i32; 2]; 4] = [[0, 6], [6, 6], [6, 0], [3, 3]];

/// Grid moves as `(row delta, col delta)`: up, down, right, left.
const MOVES: [[i32; 2]; 4] = [[-1, 0], [1, 0], [0, 1], [0, -1]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EnvKind {
    ChainDense,
    GridMazeSparse,
    KitchenLite,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::ChainDense, EnvKind::GridMazeSparse, EnvKind::KitchenLite];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::ChainDense => "chain-dense",
            EnvKind::GridMazeSparse => "grid-maze-sparse",
            EnvKind::KitchenLite => "kitchen-lite",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown environment `{s}`")))
    }
}

impl TryFrom<String> for EnvKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EnvKind> for String {
    fn from(k: EnvKind) -> String {
        k.name().to_string()
    }
}

#[derive(Clone, Debug)]
struct Maze {
    open: Vec<bool>,
    /// Open cells in row-major order.
    cells: Vec<[i32; 2]>,
    /// `dist[g][c]`: path length from cell index `c` to goal index `g`.
    dist: Vec<Vec<u32>>,
    /// Goal cell index for each start cell index.
    farthest: Vec<usize>,
}

impl Maze {
    fn generate(layout_seed: u64) -> Self {
        let rooms = (MAZE_SIZE - 1) / 2;
        let mut open = vec![false; MAZE_SIZE * MAZE_SIZE];
        let mut visited = vec![false; rooms * rooms];
        let mut rng = ChaCha8Rng::seed_from_u64(layout_seed);
        let at = |r: usize, c: usize| r * MAZE_SIZE + c;
        let mut stack = vec![(0usize, 0usize)];
        visited[0] = true;
        open[at(1, 1)] = true;
        while let Some(&(r, c)) = stack.last() {
            let mut next: Vec<(usize, usize)> = MOVES
                .iter()
                .filter_map(|m| {
                    let (nr, nc) = (r as i32 + m[0], c as i32 + m[1]);
                    (nr >= 0 && nc >= 0 && (nr as usize) < rooms && (nc as usize) < rooms)
                        .then_some((nr as usize, nc as usize))
                })
                .filter(|&(nr, nc)| !visited[nr * rooms + nc])
                .collect();
            if next.is_empty() {
                stack.pop();
                continue;
            }
            next.shuffle(&mut rng);
            let (nr, nc) = next[0];
            visited[nr * rooms + nc] = true;
            open[at(r + nr + 1, c + nc + 1)] = true;
            open[at(2 * nr + 1, 2 * nc + 1)] = true;
            stack.push((nr, nc));
        }
        let cells: Vec<[i32; 2]> = (0..MAZE_SIZE * MAZE_SIZE)
            .filter(|&i| open[i])
            .map(|i| [(i / MAZE_SIZE) as i32, (i % MAZE_SIZE) as i32])
            .collect();
        let mut maze = Maze {
            open,
            cells,
            dist: Vec::new(),
            farthest: Vec::new(),
        };
        maze.dist = (0..maze.cells.len()).map(|g| maze.bfs(maze.cells[g])).collect();
        maze.farthest = (0..maze.cells.len())
            .map(|s| {
                let d = &maze.dist[s];
                let max = *d.iter().max().unwrap();
                d.iter().position(|&x| x == max).unwrap()
            })
            .collect();
        maze
    }

    fn is_open(&self, p: [i32; 2]) -> bool {
        p[0] >= 0
            && p[1] >= 0
            && (p[0] as usize) < MAZE_SIZE
            && (p[1] as usize) < MAZE_SIZE
            && self.open[p[0] as usize * MAZE_SIZE + p[1] as usize]
    }

    fn index_of(&self, p: [i32; 2]) -> usize {
        self.cells.binary_search(&p).expect("open cell")
    }

    /// Path lengths from `from` to every open cell, indexed like `cells`.
    fn bfs(&self, from: [i32; 2]) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.cells.len()];
        let mut queue = VecDeque::from([from]);
        dist[self.index_of(from)] = 0;
        while let Some(p) = queue.pop_front() {
            let d = dist[self.index_of(p)];
            for m in MOVES {
                let q = [p[0] + m[0], p[1] + m[1]];
                if self.is_open(q) {
                    let qi = self.index_of(q);
                    if dist[qi] == u32::MAX {
                        dist[qi] = d + 1;
                        queue.push_back(q);
                    }
                }
            }
        }
        dist
    }
}

/// Static description of an environment.
#[derive(Clone, Debug)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub state_dim: usize,
    /// Width of the one-hot action encoding.
    pub action_dim: usize,
    pub horizon: usize,
    pub layout_seed: u64,
    maze: Option<Maze>,
}

impl EnvSpec {
    pub fn new(kind: EnvKind) -> Self {
        Self::with_layout(kind, 0)
    }

    /// Maze layouts depend on `layout_seed`; other environments ignore it.
    pub fn with_layout(kind: EnvKind, layout_seed: u64) -> Self {
        let (state_dim, action_dim, horizon) = match kind {
            EnvKind::ChainDense => (1, 2, 50),
            EnvKind::GridMazeSparse => (2, 4, 150),
            EnvKind::KitchenLite => (2, 4, 200),
        };
        Self {
            kind,
            state_dim,
            action_dim,
            horizon,
            layout_seed,
            maze: (kind == EnvKind::GridMazeSparse).then(|| Maze::generate(layout_seed)),
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(Self::new(name.parse()?))
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn goal_description(&self) -> &'static str {
        match self.kind {
            EnvKind::ChainDense => "agent at cell 50",
            EnvKind::GridMazeSparse => "agent in the goal cell",
            EnvKind::KitchenLite => "all four waypoints visited in order",
        }
    }

    /// Open maze cells in row-major order; empty for other environments.
    pub fn open_cells(&self) -> Vec<[i32; 2]> {
        self.maze.as_ref().map(|m| m.cells.clone()).unwrap_or_default()
    }

    pub fn is_open(&self, p: [i32; 2]) -> bool {
        match &self.maze {
            Some(m) => m.is_open(p),
            None => true,
        }
    }

    /// Shortest path length between two open maze cells.
    pub fn maze_distance(&self, from: [i32; 2], to: [i32; 2]) -> Option<u32> {
        let m = self.maze.as_ref()?;
        Some(m.dist[m.index_of(to)][m.index_of(from)])
    }

    pub fn reset(&self, seed: u64) -> EnvState {
        let (pos, goal) = match self.kind {
            EnvKind::ChainDense => ([0, 0], [0, CHAIN_LENGTH]),
            EnvKind::KitchenLite => ([0, 0], KITCHEN_WAYPOINTS[3]),
            EnvKind::GridMazeSparse => {
                let m = self.maze.as_ref().unwrap();
                let mut rng = seed::rng(seed, 0xA11);
                let s = rng.random_range(0..m.cells.len());
                (m.cells[s], m.cells[m.farthest[s]])
            }
        };
        EnvState {
            pos,
            goal,
            stage: 0,
            frontier: 0,
            step: 0,
            done: false,
            success: false,
        }
    }

    pub fn step(&self, state: &EnvState, action: usize) -> Result<Transition> {
        if state.done {
            return Err(Error::StepAfterDone);
        }
        if action >= self.action_dim {
            return Err(Error::InvalidArgument(format!(
                "action {action} outside 0..{}",
                self.action_dim
            )));
        }
        let mut next = state.clone();
        next.step += 1;
        let mut reward = 0.0;
        match self.kind {
            EnvKind::ChainDense => {
                let x = (state.pos[1] + if action == 1 { 1 } else { -1 }).clamp(0, CHAIN_LENGTH);
                next.pos[1] = x;
                if x > state.frontier {
                    next.frontier = x;
                    reward = 1.0;
                }
                next.success = x == CHAIN_LENGTH;
            }
            EnvKind::GridMazeSparse => {
                let m = MOVES[action];
                let q = [state.pos[0] + m[0], state.pos[1] + m[1]];
                if self.is_open(q) {
                    next.pos = q;
                }
                if next.pos == state.goal {
                    reward = 1.0;
                    next.success = true;
                }
            }
            EnvKind::KitchenLite => {
                let m = MOVES[action];
                next.pos = [
                    (state.pos[0] + m[0]).clamp(0, KITCHEN_SIZE - 1),
                    (state.pos[1] + m[1]).clamp(0, KITCHEN_SIZE - 1),
                ];
                if next.pos == KITCHEN_WAYPOINTS[state.stage] {
                    reward = 1.0;
                    next.stage += 1;
                    next.success = next.stage == KITCHEN_WAYPOINTS.len();
                }
            }
        }
        next.done = next.success || next.step >= self.horizon;
        Ok(Transition {
            done: next.done,
            state: next,
            reward,
        })
    }

    /// One-hot encoding of a discrete action.
    pub fn one_hot(&self, action: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.action_dim];
        v[action] = 1.0;
        v
    }

    /// Shortest-path action; the first of equally good moves wins.
    pub fn expert_action(&self, state: &EnvState) -> usize {
        match self.kind {
            EnvKind::ChainDense => 1,
            EnvKind::GridMazeSparse => {
                let m = self.maze.as_ref().unwrap();
                let dist = &m.dist[m.index_of(state.goal)];
                let here = dist[m.index_of(state.pos)];
                (0..4)
                    .find(|&a| {
                        let q = [state.pos[0] + MOVES[a][0], state.pos[1] + MOVES[a][1]];
                        m.is_open(q) && dist[m.index_of(q)] < here
                    })
                    .unwrap_or(0)
            }
            EnvKind::KitchenLite => {
                let target = KITCHEN_WAYPOINTS[state.stage.min(KITCHEN_WAYPOINTS.len() - 1)];
                let d = |p: [i32; 2]| (p[0] - target[0]).abs() + (p[1] - target[1]).abs();
                let here = d(state.pos);
                (0..4)
                    .find(|&a| d([state.pos[0] + MOVES[a][0], state.pos[1] + MOVES[a][1]]) < here)
                    .unwrap_or(0)
            }
        }
    }
}

/// Live state of one episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvState {
    /// `[row, col]`; the chain uses `[0, x]`.
    pos: [i32; 2],
    goal: [i32; 2],
    stage: usize,
    frontier: i32,
    step: usize,
    done: bool,
    success: bool,
}

impl EnvState {
    /// The state vector seen by policies.
    pub fn observation(&self, spec: &EnvSpec) -> Vec<f64> {
        match spec.kind {
            EnvKind::ChainDense => vec![self.pos[1] as f64],
            _ => vec![self.pos[0] as f64, self.pos[1] as f64],
        }
    }

    pub fn position(&self) -> [i32; 2] {
        self.pos
    }

    pub fn goal(&self) -> [i32; 2] {
        self.goal
    }

    /// Completed kitchen stages.
    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Goal predicate.
    pub fn succeeded(&self) -> bool {
        self.success
    }
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Expert,
    Medium,
}

impl Quality {
    pub fn epsilon(self) -> f64 {
        match self {
            Quality::Expert => 0.0,
            Quality::Medium => 0.3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Quality::Expert => "expert",
            Quality::Medium => "medium",
        }
    }
}

impl FromStr for Quality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(Quality::Expert),
            "medium" => Ok(Quality::Medium),
            _ => Err(Error::InvalidArgument(format!("unknown demonstrator quality `{s}`"))),
        }
    }
}

/// Expert policy with probability `1 - epsilon`, otherwise a uniformly
/// random action.
#[derive(Clone, Debug)]
pub struct Demonstrator {
    pub epsilon: f64,
    rng: ChaCha8Rng,
}

impl Demonstrator {
    pub fn new(epsilon: f64, seed: u64) -> Self {
        Self {
            epsilon,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn act(&mut self, spec: &EnvSpec, state: &EnvState) -> usize {
        if self.epsilon > 0.0 && self.rng.random::<f64>() < self.epsilon {
            self.rng.random_range(0..spec.action_dim)
        } else {
            spec.expert_action(state)
        }
    }
}

/// Scripted demonstrator for one episode.
pub fn scripted_demonstrator(quality: Quality, seed: u64) -> Demonstrator {
    Demonstrator::new(quality.epsilon(), seed)
}

/// Rolls out one demonstrator episode from `reset(seed)`.
pub fn demonstrate(spec: &EnvSpec, epsilon: f64, seed: u64) -> Trajectory {
    let mut demo = Demonstrator::new(epsilon, seed::derive(seed, 1));
    let mut state = spec.reset(seed);
    let (mut states, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
    while !state.is_done() {
        let a = demo.act(spec, &state);
        states.push(state.observation(spec));
        actions.push(spec.one_hot(a));
        let tr = spec.step(&state, a).expect("episode not done");
        rewards.push(tr.reward);
        state = tr.state;
    }
    Trajectory::new(states, actions, rewards).expect("well-formed rollout")
}

/// Records `episodes` demonstrator rollouts, failures included.
pub fn generate_dataset(spec: &EnvSpec, quality: Quality, episodes: usize, seed: u64) -> Result<Dataset> {
    generate_dataset_with(spec, quality.epsilon(), Some(quality.name()), episodes, seed)
}

pub fn generate_dataset_with(
    spec: &EnvSpec,
    epsilon: f64,
    label: Option<&str>,
    episodes: usize,
    seed: u64,
) -> Result<Dataset> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("episodes must be at least 1".into()));
    }
    let trajectories = diffcore::par::map_range(episodes, |e| {
        demonstrate(spec, epsilon, seed::derive(seed, e as u64))
    });
    let n = trajectories.len() as f64;
    let meta = DatasetMeta {
        env: spec.name().to_string(),
        state_dim: spec.state_dim,
        action_dim: spec.action_dim,
        seed,
        quality: label.map(str::to_string),
        episodes: Some(episodes),
        mean_return: Some(trajectories.iter().map(Trajectory::total_return).sum::<f64>() / n),
        mean_length: Some(trajectories.iter().map(Trajectory::len).sum::<usize>() as f64 / n),
    };
    Dataset::new(meta, trajectories)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resets() {
        let chain = EnvSpec::new(EnvKind::ChainDense);
        assert_eq!(chain.reset(3).observation(&chain), vec![0.0]);
        let maze = EnvSpec::new(EnvKind::GridMazeSparse);
        assert_eq!(maze.reset(11), maze.reset(11));
        let kitchen = EnvSpec::new(EnvKind::KitchenLite);
        let s = kitchen.reset(5);
        assert_eq!(s.position(), [0, 0]);
        assert_eq!(s.stage(), 0);
    }

    #[test]
    fn maze_is_a_spanning_tree_of_rooms() {
        let maze = EnvSpec::new(EnvKind::GridMazeSparse);
        // 7x7 rooms plus the 48 passages of a spanning tree
        assert_eq!(maze.open_cells().len(), 49 + 48);
        let other = EnvSpec::with_layout(EnvKind::GridMazeSparse, 1);
        assert_ne!(maze.open_cells(), other.open_cells());
    }

    #[test]
    fn wall_collision_keeps_position() {
        let maze = EnvSpec::new(EnvKind::GridMazeSparse);
        let s = maze.reset(0);
        let p = s.position();
        let blocked = (0..4)
            .find(|&a| !maze.is_open([p[0] + MOVES[a][0], p[1] + MOVES[a][1]]))
            .expect("every room has a wall");
        let tr = maze.step(&s, blocked).unwrap();
        assert_eq!(tr.state.position(), p);
        assert_eq!(tr.reward, 0.0);
    }

    #[test]
    fn kitchen_ignores_out_of_order_waypoints() {
        let k = EnvSpec::new(EnvKind::KitchenLite);
        let mut s = k.reset(0);
        // walk down column 0 to (6, 0), which is waypoint 3, before waypoint 1
        for _ in 0..6 {
            let tr = k.step(&s, 1).unwrap();
            assert_eq!(tr.reward, 0.0);
            s = tr.state;
        }
        assert_eq!(s.position(), KITCHEN_WAYPOINTS[2]);
        assert_eq!(s.stage(), 0);
    }

    #[test]
    fn step_after_done_is_an_error() {
        let chain = EnvSpec::new(EnvKind::ChainDense);
        let mut s = chain.reset(0);
        while !s.is_done() {
            s = chain.step(&s, 0).unwrap().state;
        }
        assert!(!s.succeeded());
        assert!(matches!(chain.step(&s, 1), Err(Error::StepAfterDone)));
    }

    #[test]
    fn expert_chain_return_is_fifty() {
        let chain = EnvSpec::new(EnvKind::ChainDense);
        let t = demonstrate(&chain, 0.0, 7);
        assert_eq!(t.total_return(), 50.0);
        assert_eq!(t.len(), 50);
    }
}
