//! Desk-scale continuous 2-D point mazes with sparse goal reward, scripted
//! behavior policies, dataset generation, and policy evaluation.

use std::collections::VecDeque;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Trajectory, Transition};
use crate::error::{ClueError, Result};
use crate::parallel::map_range;
use crate::rng::{normal, seeded, Rng};

/// Displacement per unit action.
pub const STEP_SCALE: f64 = 0.1;
/// Distance kept from a wall after a clipped move.
const CONTACT_GAP: f64 = 1e-7;

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            x0: x0.min(x1),
            y0: y0.min(y1),
            x1: x0.max(x1),
            y1: y0.max(y1),
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    /// Strict interior test; walls are open sets so touching is allowed.
    pub fn contains_open(&self, p: &[f64]) -> bool {
        p[0] > self.x0 && p[0] < self.x1 && p[1] > self.y0 && p[1] < self.y1
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0]
    }

    pub fn inflate(&self, m: f64) -> Rect {
        Rect::new(self.x0 - m, self.y0 - m, self.x1 + m, self.y1 + m)
    }

    fn overlaps_open(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    /// Parameter `t ∈ [0, 1]` at which the segment `p → p + d` first enters the
    /// open interior, if it does.
    pub fn segment_entry(&self, p: &[f64], d: &[f64]) -> Option<f64> {
        self.segment_hit(p, d).map(|(t, _)| t)
    }

    /// Like `segment_entry`, also returning the axis (0 = x, 1 = y) of the face hit.
    fn segment_hit(&self, p: &[f64], d: &[f64]) -> Option<(f64, usize)> {
        let mut t_in = f64::NEG_INFINITY;
        let mut axis = 0;
        let mut t_out = f64::INFINITY;
        for (k, (lo, hi, pi, di)) in [
            (self.x0, self.x1, p[0], d[0]),
            (self.y0, self.y1, p[1], d[1]),
        ]
        .into_iter()
        .enumerate()
        {
            if di == 0.0 {
                if pi <= lo || pi >= hi {
                    return None;
                }
            } else {
                let (a, b) = ((lo - pi) / di, (hi - pi) / di);
                if a.min(b) > t_in {
                    t_in = a.min(b);
                    axis = k;
                }
                t_out = t_out.min(a.max(b));
            }
        }
        (t_in < t_out && t_out > 0.0 && t_in < 1.0).then_some((t_in.max(0.0), axis))
    }

    fn to_array(self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// JSON form of a maze: `{"walls": [[x0,y0,x1,y1],...], "start": [...], "goal": [...], "max_steps": n}`.
/// `bounds` is optional and defaults to the bounding box of everything else.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayoutSpec {
    pub walls: Vec<[f64; 4]>,
    pub start: [f64; 4],
    pub goal: [f64; 4],
    pub max_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[f64; 4]>,
}

impl LayoutSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    /// Builds a layout from a character map: `#` wall, `S` start, `G` goal,
    /// anything else free. The first row is the top of the maze. Starts are
    /// inset from their cell; the goal is the whole cell.
    pub fn from_grid(rows: &[&str], cell: f64, max_steps: usize) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        let mut walls = Vec::new();
        let (mut start, mut goal) = (None, None);
        let margin = 0.2 * cell;
        for (r, line) in rows.iter().enumerate() {
            if line.len() != w {
                return Err(ClueError::InvalidArgument(
                    "grid rows differ in length".into(),
                ));
            }
            let y0 = (h - 1 - r) as f64 * cell;
            // Merge horizontal runs of wall cells into one rectangle each.
            let bytes = line.as_bytes();
            let mut c = 0;
            while c < w {
                match bytes[c] {
                    b'#' => {
                        let run = c;
                        while c < w && bytes[c] == b'#' {
                            c += 1;
                        }
                        walls.push([run as f64 * cell, y0, c as f64 * cell, y0 + cell]);
                        continue;
                    }
                    b'S' => {
                        start = Some([
                            c as f64 * cell + margin,
                            y0 + margin,
                            (c + 1) as f64 * cell - margin,
                            y0 + cell - margin,
                        ])
                    }
                    b'G' => goal = Some([c as f64 * cell, y0, (c + 1) as f64 * cell, y0 + cell]),
                    _ => {}
                }
                c += 1;
            }
        }
        Ok(Self {
            walls,
            start: start
                .ok_or_else(|| ClueError::InvalidArgument("grid has no start cell".into()))?,
            goal: goal.ok_or_else(|| ClueError::InvalidArgument("grid has no goal cell".into()))?,
            max_steps,
            bounds: Some([0.0, 0.0, w as f64 * cell, h as f64 * cell]),
        })
    }

    /// Built-in layouts: `umaze`, `medium`, `large`, and the open `arena`.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "umaze" => Self::from_grid(&["#####", "#S..#", "###.#", "#G..#", "#####"], 0.5, 120),
            "medium" => Self::from_grid(
                &[
                    "########", "#S.#...#", "#..#.#.#", "#.##.#.#", "#....#.#", "##.###.#",
                    "#...#.G#", "########",
                ],
                0.5,
                200,
            ),
            "large" => Self::from_grid(
                &[
                    "############",
                    "#S...#.....#",
                    "#.##.#.###.#",
                    "#.#..#...#.#",
                    "#.#.####.#.#",
                    "#........#.#",
                    "###.#.####.#",
                    "#...#....#G#",
                    "############",
                ],
                0.5,
                300,
            ),
            "arena" => Self::from_grid(
                &[
                    "########", "#......#", "#......#", "#..S...#", "#......#", "#......#",
                    "#.....G#", "########",
                ],
                0.5,
                60,
            ),
            other => Err(ClueError::InvalidArgument(format!(
                "unknown built-in layout {other:?}"
            ))),
        }
    }

    /// Path to a JSON layout file, or else a built-in name.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if Path::new(name_or_path).is_file() {
            Self::load(name_or_path)
        } else {
            Self::builtin(name_or_path)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub next_state: [f64; 2],
    pub reward: f64,
    /// Episode over: goal reached or step limit hit.
    pub terminal: bool,
    pub success: bool,
}

/// Continuous point mass in a walled rectangle.
#[derive(Debug, Clone)]
pub struct PointMaze {
    pub walls: Vec<Rect>,
    pub start: Rect,
    pub goal: Rect,
    pub bounds: Rect,
    pub max_steps: usize,
    /// Emit `−‖s' − goal centre‖` instead of the sparse goal indicator.
    pub dense_reward: bool,
    planner: Planner,
}

impl PointMaze {
    pub fn new(spec: &LayoutSpec) -> Result<Self> {
        let r = |a: [f64; 4]| Rect::new(a[0], a[1], a[2], a[3]);
        let walls: Vec<Rect> = spec.walls.iter().map(|&w| r(w)).collect();
        let (start, goal) = (r(spec.start), r(spec.goal));
        let bounds = match spec.bounds {
            Some(b) => r(b),
            None => walls.iter().chain([&start, &goal]).fold(start, |acc, w| {
                Rect::new(
                    acc.x0.min(w.x0),
                    acc.y0.min(w.y0),
                    acc.x1.max(w.x1),
                    acc.y1.max(w.y1),
                )
            }),
        };
        if spec.max_steps == 0 {
            return Err(ClueError::InvalidArgument(
                "max_steps must be positive".into(),
            ));
        }
        for w in &walls {
            if w.overlaps_open(&start) || w.overlaps_open(&goal) {
                return Err(ClueError::InvalidArgument(
                    "start and goal regions must not overlap walls".into(),
                ));
            }
        }
        if start.overlaps_open(&goal) {
            return Err(ClueError::InvalidArgument(
                "start and goal regions overlap".into(),
            ));
        }
        let planner = Planner::build(&walls, &bounds, &goal)?;
        let (i, j) = planner.cell_of(&start.center());
        if planner.dist[j * planner.nx + i] == UNREACHABLE {
            return Err(ClueError::InvalidArgument(
                "goal is unreachable from the start region".into(),
            ));
        }
        Ok(Self {
            walls,
            start,
            goal,
            bounds,
            max_steps: spec.max_steps,
            dense_reward: false,
            planner,
        })
    }

    pub fn builtin(name: &str) -> Result<Self> {
        Self::new(&LayoutSpec::builtin(name)?)
    }

    pub fn spec(&self) -> LayoutSpec {
        LayoutSpec {
            walls: self.walls.iter().map(|w| w.to_array()).collect(),
            start: self.start.to_array(),
            goal: self.goal.to_array(),
            max_steps: self.max_steps,
            bounds: Some(self.bounds.to_array()),
        }
    }

    /// Same walls with a different goal region.
    pub fn with_goal(&self, goal: Rect) -> Result<Self> {
        let mut spec = self.spec();
        spec.goal = goal.to_array();
        let mut env = Self::new(&spec)?;
        env.dense_reward = self.dense_reward;
        Ok(env)
    }

    pub fn is_free(&self, p: &[f64]) -> bool {
        self.bounds.contains(p) && !self.walls.iter().any(|w| w.contains_open(p))
    }

    pub fn sample_start(&self, rng: &mut Rng) -> [f64; 2] {
        [
            rng.random_range(self.start.x0..=self.start.x1),
            rng.random_range(self.start.y0..=self.start.y1),
        ]
    }

    /// Position after moving from `s` by `STEP_SCALE · a`, stopping just short
    /// of the first wall on the way.
    ///
    /// On contact the point stops just short of the face and the remaining
    /// motion tangent to that face is applied (one slide, no further bounces).
    pub fn move_point(&self, s: &[f64], a: &[f64]) -> [f64; 2] {
        let a = [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)];
        let d = [STEP_SCALE * a[0], STEP_SCALE * a[1]];
        let (p, rest) = self.advance([s[0], s[1]], d);
        let p = match rest {
            Some(r) => self.advance(p, r).0,
            None => p,
        };
        let p = [
            p[0].clamp(self.bounds.x0, self.bounds.x1),
            p[1].clamp(self.bounds.y0, self.bounds.y1),
        ];
        if self.is_free(&p) {
            p
        } else {
            [s[0], s[1]]
        }
    }

    /// Moves along `d` until the first wall; returns the point and the tangential remainder.
    fn advance(&self, s: [f64; 2], d: [f64; 2]) -> ([f64; 2], Option<[f64; 2]>) {
        let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if len == 0.0 {
            return (s, None);
        }
        let mut hit: Option<(f64, usize)> = None;
        for w in &self.walls {
            if let Some((t, axis)) = w.segment_hit(&s, &d) {
                if hit.is_none_or(|(best, _)| t < best) {
                    hit = Some((t, axis));
                }
            }
        }
        match hit {
            None => ([s[0] + d[0], s[1] + d[1]], None),
            Some((t, axis)) => {
                let t = (t - CONTACT_GAP / len).max(0.0);
                let p = [s[0] + t * d[0], s[1] + t * d[1]];
                let mut rest = [(1.0 - t) * d[0], (1.0 - t) * d[1]];
                rest[axis] = 0.0;
                (p, Some(rest))
            }
        }
    }

    /// One transition. `steps_taken` counts actions already executed this episode.
    pub fn step(&self, s: &[f64], a: &[f64], steps_taken: usize) -> StepResult {
        let next_state = self.move_point(s, a);
        let success = self.goal.contains(&next_state);
        let reward = if self.dense_reward {
            let c = self.goal.center();
            -((next_state[0] - c[0]).powi(2) + (next_state[1] - c[1]).powi(2)).sqrt()
        } else if success {
            1.0
        } else {
            0.0
        };
        StepResult {
            next_state,
            reward,
            terminal: success || steps_taken + 1 >= self.max_steps,
            success,
        }
    }

    /// Quadrant of `p` around the centre of the maze bounds: 0 = south-west,
    /// 1 = south-east, 2 = north-west, 3 = north-east.
    pub fn quadrant(&self, p: &[f64]) -> usize {
        let c = self.bounds.center();
        usize::from(p[0] >= c[0]) + 2 * usize::from(p[1] >= c[1])
    }

    /// Action of the scripted shortest-path expert.
    pub fn expert_action(&self, s: &[f64]) -> [f64; 2] {
        let target = self.planner.waypoint(s, self);
        let d = [target[0] - s[0], target[1] - s[1]];
        let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if len < 1e-12 {
            return [0.0, 0.0];
        }
        let scale = if len < STEP_SCALE {
            1.0 / STEP_SCALE
        } else {
            1.0 / len
        };
        [
            (d[0] * scale).clamp(-1.0, 1.0),
            (d[1] * scale).clamp(-1.0, 1.0),
        ]
    }

    /// Whether the straight segment `p → q` keeps `margin` away from every wall.
    fn visible(&self, p: &[f64], q: &[f64], margin: f64) -> bool {
        let d = [q[0] - p[0], q[1] - p[1]];
        !self
            .walls
            .iter()
            .any(|w| w.inflate(margin).segment_entry(p, &d).is_some())
    }
}

/// Breadth-first distance field to the goal on a fine occupancy grid.
#[derive(Debug, Clone)]
struct Planner {
    res: f64,
    origin: [f64; 2],
    nx: usize,
    ny: usize,
    dist: Vec<u32>,
}

const UNREACHABLE: u32 = u32::MAX;

impl Planner {
    fn build(walls: &[Rect], bounds: &Rect, goal: &Rect) -> Result<Self> {
        let res = 0.05;
        let nx = ((bounds.x1 - bounds.x0) / res).round().max(1.0) as usize;
        let ny = ((bounds.y1 - bounds.y0) / res).round().max(1.0) as usize;
        let origin = [bounds.x0, bounds.y0];
        let cell_rect = |i: usize, j: usize| {
            Rect::new(
                origin[0] + i as f64 * res,
                origin[1] + j as f64 * res,
                origin[0] + (i + 1) as f64 * res,
                origin[1] + (j + 1) as f64 * res,
            )
        };
        // Cells touching an inflated wall are blocked so paths keep some clearance.
        let free: Vec<bool> = (0..nx * ny)
            .map(|k| {
                let r = cell_rect(k % nx, k / nx);
                !walls.iter().any(|w| w.inflate(0.04).overlaps_open(&r))
            })
            .collect();
        let mut dist = vec![UNREACHABLE; nx * ny];
        let mut queue = VecDeque::new();
        for k in 0..nx * ny {
            let c = cell_rect(k % nx, k / nx).center();
            if free[k] && goal.contains(&c) {
                dist[k] = 0;
                queue.push_back(k);
            }
        }
        if queue.is_empty() {
            return Err(ClueError::InvalidArgument(
                "goal region contains no free planning cell".into(),
            ));
        }
        while let Some(k) = queue.pop_front() {
            let (i, j) = ((k % nx) as isize, (k / nx) as isize);
            for (di, dj) in NEIGHBORS {
                let (a, b) = (i + di, j + dj);
                if a < 0 || b < 0 || a >= nx as isize || b >= ny as isize {
                    continue;
                }
                let n = b as usize * nx + a as usize;
                // Diagonal moves need both orthogonal cells free.
                let corner_ok = di == 0
                    || dj == 0
                    || (free[j as usize * nx + a as usize] && free[b as usize * nx + i as usize]);
                if free[n] && corner_ok && dist[n] == UNREACHABLE {
                    dist[n] = dist[k] + 1;
                    queue.push_back(n);
                }
            }
        }
        Ok(Self {
            res,
            origin,
            nx,
            ny,
            dist,
        })
    }

    fn cell_of(&self, p: &[f64]) -> (usize, usize) {
        let i = (((p[0] - self.origin[0]) / self.res).floor().max(0.0) as usize).min(self.nx - 1);
        let j = (((p[1] - self.origin[1]) / self.res).floor().max(0.0) as usize).min(self.ny - 1);
        (i, j)
    }

    fn center(&self, k: usize) -> [f64; 2] {
        [
            self.origin[0] + ((k % self.nx) as f64 + 0.5) * self.res,
            self.origin[1] + ((k / self.nx) as f64 + 0.5) * self.res,
        ]
    }

    /// Nearest reachable cell to `p` (by grid search in growing rings).
    fn nearest_reachable(&self, p: &[f64]) -> Option<usize> {
        let (ci, cj) = self.cell_of(p);
        for radius in 0..self.nx.max(self.ny) as isize {
            let mut best: Option<(f64, usize)> = None;
            for dj in -radius..=radius {
                for di in -radius..=radius {
                    if di.abs() != radius && dj.abs() != radius {
                        continue;
                    }
                    let (a, b) = (ci as isize + di, cj as isize + dj);
                    if a < 0 || b < 0 || a >= self.nx as isize || b >= self.ny as isize {
                        continue;
                    }
                    let k = b as usize * self.nx + a as usize;
                    if self.dist[k] != UNREACHABLE {
                        let c = self.center(k);
                        let d = (c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2);
                        if best.is_none_or(|(bd, _)| d < bd) {
                            best = Some((d, k));
                        }
                    }
                }
            }
            if let Some((_, k)) = best {
                return Some(k);
            }
        }
        None
    }

    /// Furthest visible point along the descending path from `p`.
    fn waypoint(&self, p: &[f64], env: &PointMaze) -> [f64; 2] {
        if env.goal.contains(p) {
            return env.goal.center();
        }
        let Some(mut k) = self.nearest_reachable(p) else {
            return [p[0], p[1]];
        };
        let mut path = vec![self.center(k)];
        for _ in 0..40 {
            if self.dist[k] == 0 {
                path.push(env.goal.center());
                break;
            }
            let (i, j) = ((k % self.nx) as isize, (k / self.nx) as isize);
            let next = NEIGHBORS
                .iter()
                .filter_map(|(di, dj)| {
                    let (a, b) = (i + di, j + dj);
                    if a < 0 || b < 0 || a >= self.nx as isize || b >= self.ny as isize {
                        return None;
                    }
                    let n = b as usize * self.nx + a as usize;
                    (self.dist[n] < self.dist[k]).then_some(n)
                })
                .min_by_key(|&n| self.dist[n]);
            match next {
                Some(n) => {
                    k = n;
                    path.push(self.center(k));
                }
                None => break,
            }
        }
        path.iter()
            .rev()
            .find(|q| env.visible(p, &q[..], 0.02))
            .copied()
            .unwrap_or(path[0])
    }
}

const NEIGHBORS: [(isize, isize); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
];

/// Scripted data-collection policies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BehaviorPolicy {
    /// Unit-speed random heading, redrawn with probability `switch_prob` each step.
    Random {
        switch_prob: f64,
    },
    /// Shortest-path expert that takes a uniform random action with probability `eps`.
    NoisyExpert {
        eps: f64,
    },
    WaypointExpert,
    /// Shortest-path navigation to a random free point, redrawn whenever it is
    /// reached, with uniform random actions at probability `eps`.
    Diverse {
        eps: f64,
    },
}

impl BehaviorPolicy {
    pub fn random() -> Self {
        BehaviorPolicy::Random { switch_prob: 0.1 }
    }

    /// Parses `random`, `expert`, or `noisy:<eps>`.
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "random" => Ok(Self::random()),
            "expert" | "waypoint" => Ok(BehaviorPolicy::WaypointExpert),
            "diverse" => Ok(BehaviorPolicy::Diverse { eps: 0.1 }),
            other => {
                let parsed = match other.split_once(':') {
                    Some(("noisy", e)) => e
                        .parse::<f64>()
                        .ok()
                        .map(|eps| BehaviorPolicy::NoisyExpert { eps }),
                    Some(("diverse", e)) => e
                        .parse::<f64>()
                        .ok()
                        .map(|eps| BehaviorPolicy::Diverse { eps }),
                    _ => None,
                };
                match parsed {
                    Some(
                        p @ (BehaviorPolicy::NoisyExpert { eps } | BehaviorPolicy::Diverse { eps }),
                    ) if (0.0..=1.0).contains(&eps) => Ok(p),
                    _ => Err(ClueError::InvalidArgument(format!(
                        "unknown behavior policy {name:?}"
                    ))),
                }
            }
        }
    }
}

fn uniform_action(rng: &mut Rng) -> [f64; 2] {
    [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]
}

fn random_heading(rng: &mut Rng) -> [f64; 2] {
    let th = rng.random_range(0.0..std::f64::consts::TAU);
    [th.cos(), th.sin()]
}

/// Small goal square around a random free point at least 0.15 from any wall.
fn random_subgoal(env: &PointMaze, rng: &mut Rng) -> Option<PointMaze> {
    let half = 0.1;
    for _ in 0..1000 {
        let p = [
            rng.random_range(env.bounds.x0..env.bounds.x1),
            rng.random_range(env.bounds.y0..env.bounds.y1),
        ];
        let r = Rect::new(p[0] - half, p[1] - half, p[0] + half, p[1] + half);
        if env.is_free(&p)
            && !env.walls.iter().any(|w| w.inflate(0.05).overlaps_open(&r))
            && !env.start.overlaps_open(&r)
        {
            if let Ok(sub) = env.with_goal(r) {
                return Some(sub);
            }
        }
    }
    None
}

/// Rolls out one episode of a scripted policy.
pub fn rollout_behavior(env: &PointMaze, policy: BehaviorPolicy, rng: &mut Rng) -> Trajectory {
    let mut s = env.sample_start(rng);
    let mut heading = random_heading(rng);
    let mut subgoal = match policy {
        BehaviorPolicy::Diverse { .. } => random_subgoal(env, rng),
        _ => None,
    };
    let mut transitions = Vec::with_capacity(env.max_steps);
    let mut success = false;
    for t in 0..env.max_steps {
        let a = match policy {
            BehaviorPolicy::Random { switch_prob } => {
                if rng.random::<f64>() < switch_prob {
                    heading = random_heading(rng);
                }
                let n = [0.1 * normal(rng), 0.1 * normal(rng)];
                [
                    (heading[0] + n[0]).clamp(-1.0, 1.0),
                    (heading[1] + n[1]).clamp(-1.0, 1.0),
                ]
            }
            BehaviorPolicy::NoisyExpert { eps } => {
                if rng.random::<f64>() < eps {
                    uniform_action(rng)
                } else {
                    env.expert_action(&s)
                }
            }
            BehaviorPolicy::WaypointExpert => env.expert_action(&s),
            BehaviorPolicy::Diverse { eps } => {
                if subgoal.as_ref().is_some_and(|g| g.goal.contains(&s)) {
                    subgoal = random_subgoal(env, rng);
                }
                match &subgoal {
                    Some(g) if rng.random::<f64>() >= eps => g.expert_action(&s),
                    _ => uniform_action(rng),
                }
            }
        };
        let out = env.step(&s, &a, t);
        transitions.push(Transition {
            state: s.to_vec(),
            action: a.to_vec(),
            reward: Some(out.reward),
            next_state: out.next_state.to_vec(),
            // Step-limit cut-offs are truncations, not MDP terminations.
            terminal: out.success,
        });
        s = out.next_state;
        if out.terminal {
            success = out.success;
            break;
        }
    }
    Trajectory::new(transitions, Some(success))
}

/// `episodes` rollouts of one policy. Each episode gets its own generator
/// seeded from `rng`, so results do not depend on the worker count.
pub fn generate_dataset(
    env: &PointMaze,
    policy: BehaviorPolicy,
    episodes: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    generate_mixture(env, &[(policy, 1.0)], episodes, rng)
}

/// Splits `episodes` across policies in proportion to their weights (largest
/// remainder) and concatenates their rollouts in the given order.
pub fn generate_mixture(
    env: &PointMaze,
    mix: &[(BehaviorPolicy, f64)],
    episodes: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    if episodes == 0 {
        return Err(ClueError::InvalidArgument(
            "episodes must be at least 1".into(),
        ));
    }
    let counts = mixture_counts(mix.iter().map(|m| m.1), episodes)?;
    let plan: Vec<(BehaviorPolicy, u64)> = mix
        .iter()
        .zip(&counts)
        .flat_map(|(&(p, _), &n)| std::iter::repeat_n(p, n))
        .map(|p| (p, rng.random::<u64>()))
        .collect();
    let trajs = map_range(plan.len(), |i| {
        rollout_behavior(env, plan[i].0, &mut seeded(plan[i].1))
    });
    Dataset::new(trajs)
}

pub fn mixture_counts(weights: impl Iterator<Item = f64>, total: usize) -> Result<Vec<usize>> {
    let w: Vec<f64> = weights.collect();
    let sum: f64 = w.iter().sum();
    if w.is_empty() || w.iter().any(|x| !(*x >= 0.0)) || !(sum > 0.0) {
        return Err(ClueError::InvalidArgument(
            "mixture weights must be non-negative with a positive sum".into(),
        ));
    }
    let exact: Vec<f64> = w.iter().map(|x| x / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let missing = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    Ok(counts)
}

/// Reward-free data for skill discovery: noisy experts heading to the four
/// corner regions of the open arena, in equal shares.
pub fn four_goal_dataset(
    arena: &PointMaze,
    episodes: usize,
    eps: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if episodes == 0 {
        return Err(ClueError::InvalidArgument(
            "episodes must be at least 1".into(),
        ));
    }
    let goals = corner_goals(arena);
    let envs: Vec<PointMaze> = goals
        .iter()
        .map(|&g| arena.with_goal(g))
        .collect::<Result<_>>()?;
    let seeds: Vec<u64> = (0..episodes).map(|_| rng.random::<u64>()).collect();
    let trajs = map_range(episodes, |i| {
        let mut t = rollout_behavior(
            &envs[i % 4],
            BehaviorPolicy::NoisyExpert { eps },
            &mut seeded(seeds[i]),
        );
        t.transitions.iter_mut().for_each(|tr| tr.reward = None);
        t.success = None;
        t
    });
    Dataset::new(trajs)
}

/// Goal squares in the four corners of the free space, ordered by quadrant index.
pub fn corner_goals(arena: &PointMaze) -> [Rect; 4] {
    let (b, cell) = (arena.bounds, 0.5);
    let size = 0.3;
    let inner = Rect::new(b.x0 + cell, b.y0 + cell, b.x1 - cell, b.y1 - cell);
    let pad = 0.1;
    [
        Rect::new(
            inner.x0 + pad,
            inner.y0 + pad,
            inner.x0 + pad + size,
            inner.y0 + pad + size,
        ),
        Rect::new(
            inner.x1 - pad - size,
            inner.y0 + pad,
            inner.x1 - pad,
            inner.y0 + pad + size,
        ),
        Rect::new(
            inner.x0 + pad,
            inner.y1 - pad - size,
            inner.x0 + pad + size,
            inner.y1 - pad,
        ),
        Rect::new(
            inner.x1 - pad - size,
            inner.y1 - pad - size,
            inner.x1 - pad,
            inner.y1 - pad,
        ),
    ]
}

/// Anything that maps a state to an action for evaluation rollouts.
pub trait Policy: Sync {
    fn act(&self, state: &[f64], rng: &mut Rng) -> Vec<f64>;
}

/// The shortest-path expert as an evaluation policy.
pub struct ScriptedExpert<'a>(pub &'a PointMaze);

impl Policy for ScriptedExpert<'_> {
    fn act(&self, state: &[f64], _rng: &mut Rng) -> Vec<f64> {
        self.0.expert_action(state).to_vec()
    }
}

/// Uniform random actions.
pub struct UniformRandom;

impl Policy for UniformRandom {
    fn act(&self, _state: &[f64], rng: &mut Rng) -> Vec<f64> {
        uniform_action(rng).to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub ret: f64,
    pub success: bool,
    pub length: usize,
    pub final_state: [f64; 2],
    pub path: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub mean_return: f64,
    pub success_rate: f64,
    pub episodes: Vec<EpisodeRecord>,
}

pub fn run_episode(env: &PointMaze, policy: &dyn Policy, rng: &mut Rng) -> EpisodeRecord {
    let mut s = env.sample_start(rng);
    let mut path = vec![s];
    let mut ret = 0.0;
    let mut success = false;
    let mut length = 0;
    for t in 0..env.max_steps {
        let a = policy.act(&s, rng);
        let out = env.step(&s, &a, t);
        ret += out.reward;
        s = out.next_state;
        path.push(s);
        length = t + 1;
        if out.terminal {
            success = out.success;
            break;
        }
    }
    EpisodeRecord {
        ret,
        success,
        length,
        final_state: s,
        path,
    }
}

/// Mean return and success rate over `episodes` rollouts.
pub fn evaluate(
    env: &PointMaze,
    policy: &dyn Policy,
    episodes: usize,
    rng: &mut Rng,
) -> EvalSummary {
    let seeds: Vec<u64> = (0..episodes).map(|_| rng.random::<u64>()).collect();
    let records = map_range(episodes, |i| {
        run_episode(env, policy, &mut seeded(seeds[i]))
    });
    summarize(records)
}

fn summarize(episodes: Vec<EpisodeRecord>) -> EvalSummary {
    let n = episodes.len().max(1) as f64;
    EvalSummary {
        mean_return: episodes.iter().map(|e| e.ret).sum::<f64>() / n,
        success_rate: episodes.iter().filter(|e| e.success).count() as f64 / n,
        episodes,
    }
}

/// Seeds × episodes evaluation grid; one summary per seed.
pub fn evaluate_protocol(
    env: &PointMaze,
    policy: &dyn Policy,
    seeds: &[u64],
    episodes: usize,
) -> Vec<(u64, EvalSummary)> {
    seeds
        .iter()
        .map(|&seed| {
            (
                seed,
                evaluate(
                    env,
                    policy,
                    episodes,
                    &mut crate::rng::derive(seed, crate::rng::Stream::Eval, 0),
                ),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open_box() -> PointMaze {
        PointMaze::new(&LayoutSpec {
            walls: vec![[1.0, 0.0, 1.2, 1.5]],
            start: [0.1, 0.1, 0.3, 0.3],
            goal: [1.6, 1.6, 1.9, 1.9],
            max_steps: 50,
            bounds: Some([0.0, 0.0, 2.0, 2.0]),
        })
        .unwrap()
    }

    #[test]
    fn zero_action_stays_put() {
        let env = PointMaze::builtin("medium").unwrap();
        let s = env.start.center();
        assert_eq!(env.step(&s, &[0.0, 0.0], 0).next_state, s);
    }

    #[test]
    fn wall_clips_motion() {
        let env = open_box();
        // Moving right from x = 0.95 would cross the wall face at x = 1.0.
        let out = env.step(&[0.95, 0.5], &[1.0, 0.0], 0);
        assert!(
            (out.next_state[0] - 1.0).abs() < 1e-6,
            "{:?}",
            out.next_state
        );
        assert!(out.next_state[0] <= 1.0);
        assert_eq!(out.next_state[1], 0.5);
        // Diagonal approach: the segment meets the face at t = 0.5, then slides up the face.
        let out = env.step(&[0.95, 0.5], &[1.0, 1.0], 0);
        assert!((out.next_state[0] - 1.0).abs() < 1e-6);
        assert!((out.next_state[1] - 0.6).abs() < 1e-6);
        // Head-on contact leaves nothing to slide.
        let out = env.step(&[0.95, 0.5], &[1.0, 0.0], 0);
        assert_eq!(out.next_state[1], 0.5);
    }

    #[test]
    fn bounds_clip_motion() {
        let env = open_box();
        let out = env.step(&[0.02, 0.5], &[-1.0, 0.0], 0);
        assert_eq!(out.next_state, [0.0, 0.5]);
    }

    #[test]
    fn entering_goal_terminates_with_reward() {
        let env = open_box();
        let out = env.step(&[1.55, 1.7], &[1.0, 0.0], 3);
        assert!(out.success && out.terminal);
        assert_eq!(out.reward, 1.0);
        let out = env.step(&[0.5, 0.5], &[0.0, 1.0], 49);
        assert!(out.terminal && !out.success);
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn actions_are_clipped() {
        let env = open_box();
        assert_eq!(
            env.step(&[0.5, 0.5], &[5.0, 0.0], 0).next_state,
            env.step(&[0.5, 0.5], &[1.0, 0.0], 0).next_state
        );
    }

    #[test]
    fn layouts_parse_and_validate() {
        for name in ["umaze", "medium", "large", "arena"] {
            let env = PointMaze::builtin(name).unwrap();
            assert!(env.is_free(&env.start.center()));
            assert!(env.is_free(&env.goal.center()));
        }
        let bad = LayoutSpec {
            walls: vec![[0.0, 0.0, 1.0, 1.0]],
            start: [0.5, 0.5, 0.6, 0.6],
            goal: [2.0, 2.0, 2.5, 2.5],
            max_steps: 10,
            bounds: None,
        };
        assert!(PointMaze::new(&bad).is_err());
        let json = r#"{"walls": [[1.0, 0.0, 1.2, 1.0], [0.0, 1.5, 2.0, 1.6]], "start": [0.1, 0.1, 0.3, 0.3], "goal": [1.6, 0.1, 1.9, 0.4], "max_steps": 80}"#;
        let spec: LayoutSpec = serde_json::from_str(json).unwrap();
        let env = PointMaze::new(&spec).unwrap();
        assert_eq!(env.bounds, Rect::new(0.0, 0.0, 2.0, 1.6));
    }

    #[test]
    fn expert_solves_every_layout() {
        for name in ["umaze", "medium", "large", "arena"] {
            let env = PointMaze::builtin(name).unwrap();
            let summary = evaluate(&env, &ScriptedExpert(&env), 20, &mut seeded(1));
            assert_eq!(summary.success_rate, 1.0, "{name}");
        }
    }

    #[test]
    fn dense_reward_is_negative_distance() {
        let mut env = open_box();
        env.dense_reward = true;
        let c = env.goal.center();
        let out = env.step(&[c[0] - 0.3, c[1]], &[0.0, 0.0], 0);
        assert!((out.reward + 0.3).abs() < 1e-12);
    }

    #[test]
    fn mixture_counts_largest_remainder() {
        assert_eq!(
            mixture_counts([0.05, 0.95].into_iter(), 500).unwrap(),
            vec![25, 475]
        );
        assert_eq!(
            mixture_counts([1.0, 1.0, 1.0].into_iter(), 10)
                .unwrap()
                .iter()
                .sum::<usize>(),
            10
        );
        assert!(mixture_counts([0.0].into_iter(), 3).is_err());
    }

    #[test]
    fn behavior_parsing() {
        assert_eq!(
            BehaviorPolicy::parse("expert").unwrap(),
            BehaviorPolicy::WaypointExpert
        );
        assert_eq!(
            BehaviorPolicy::parse("noisy:0.25").unwrap(),
            BehaviorPolicy::NoisyExpert { eps: 0.25 }
        );
        assert!(BehaviorPolicy::parse("noisy:2").is_err());
        assert_eq!(
            BehaviorPolicy::parse("diverse:0.2").unwrap(),
            BehaviorPolicy::Diverse { eps: 0.2 }
        );
        assert!(BehaviorPolicy::parse("bogus:0.2").is_err());
    }

    #[test]
    fn quadrants() {
        let env = PointMaze::builtin("arena").unwrap();
        let q: Vec<usize> = corner_goals(&env)
            .iter()
            .map(|g| env.quadrant(&g.center()))
            .collect();
        assert_eq!(q, vec![0, 1, 2, 3]);
    }
}
