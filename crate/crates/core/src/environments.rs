//! Gridworld dynamics and convex objectives over state-action distributions.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Distribution, OccupancyMeasure, SpaceDims, TransitionKernel};
use crate::solver::StageValues;

pub const UP: usize = 0;
pub const RIGHT: usize = 1;
pub const DOWN: usize = 2;
pub const LEFT: usize = 3;
pub const STAY: usize = 4;
pub const NUM_ACTIONS: usize = 5;

const OFFSETS: [(isize, isize); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

/// Grid cell as `(row, col)`.
pub type Cell = (usize, usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    /// Row-major wall mask.
    pub walls: Vec<bool>,
    pub doors: Vec<Cell>,
    pub start: Cell,
    pub targets: Vec<Cell>,
    pub constraints: Vec<Cell>,
    /// Probability of being displaced to a random open neighbor of the
    /// intended destination.
    pub noise: f64,
    /// Apply the displacement to the stay action as well.
    #[serde(default)]
    pub noisy_stay: bool,
}

impl GridSpec {
    /// Parses a text map: `#` wall, `.` open, `D` door, `S` start,
    /// `T` target, `C` constraint. Blank lines are ignored.
    pub fn parse_map(text: &str, noise: f64) -> Result<Self> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .collect();
        if rows.is_empty() {
            return Err(Error::Config("map is empty".into()));
        }
        let width = rows[0].chars().count();
        let mut walls = Vec::with_capacity(width * rows.len());
        let (mut doors, mut targets, mut constraints) = (Vec::new(), Vec::new(), Vec::new());
        let mut start = None;
        for (r, line) in rows.iter().enumerate() {
            if line.chars().count() != width {
                return Err(Error::Config(format!(
                    "map row {r} has {} columns, expected {width}",
                    line.chars().count()
                )));
            }
            for (c, ch) in line.chars().enumerate() {
                walls.push(ch == '#');
                match ch {
                    '#' | '.' => {}
                    'D' => doors.push((r, c)),
                    'T' => targets.push((r, c)),
                    'C' => constraints.push((r, c)),
                    'S' => {
                        if start.replace((r, c)).is_some() {
                            return Err(Error::Config("map has more than one start cell".into()));
                        }
                    }
                    other => {
                        return Err(Error::Config(format!(
                            "unknown map character {other:?} at row {r}, column {c}"
                        )))
                    }
                }
            }
        }
        let spec = GridSpec {
            width,
            height: rows.len(),
            walls,
            doors,
            start: start.ok_or_else(|| Error::Config("map has no start cell".into()))?,
            targets,
            constraints,
            noise,
            noisy_stay: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load_map(path: &Path, noise: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_map(&text, noise).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_map(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                let cell = (r, c);
                let ch = if self.is_wall(cell) {
                    '#'
                } else if cell == self.start {
                    'S'
                } else if self.targets.contains(&cell) {
                    'T'
                } else if self.constraints.contains(&cell) {
                    'C'
                } else if self.doors.contains(&cell) {
                    'D'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }

    #[inline]
    pub fn is_wall(&self, (r, c): Cell) -> bool {
        self.walls[r * self.width + c]
    }

    fn in_grid(&self, (r, c): Cell) -> bool {
        r < self.height && c < self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("grid must have positive width and height".into()));
        }
        if self.walls.len() != self.width * self.height {
            return Err(Error::Config(format!(
                "wall mask has {} cells, expected {}",
                self.walls.len(),
                self.width * self.height
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise must lie in [0, 1], got {}", self.noise)));
        }
        let check = |cell: Cell, what: &str| -> Result<()> {
            if !self.in_grid(cell) || self.is_wall(cell) {
                return Err(Error::Config(format!("{what} {cell:?} is not an open cell")));
            }
            Ok(())
        };
        check(self.start, "start cell")?;
        for &d in &self.doors {
            check(d, "door")?;
        }
        for &t in &self.targets {
            check(t, "target")?;
        }
        for &c in &self.constraints {
            check(c, "constraint cell")?;
            if self.targets.contains(&c) {
                return Err(Error::Config(format!("cell {c:?} is both target and constraint")));
            }
        }
        Ok(())
    }
}

/// Open cells of a [`GridSpec`] numbered row-major as states.
#[derive(Clone, Debug, PartialEq)]
pub struct GridWorld {
    spec: GridSpec,
    state_of: Vec<Option<usize>>,
    cells: Vec<Cell>,
}

impl GridWorld {
    pub fn new(spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        let mut state_of = vec![None; spec.width * spec.height];
        let mut cells = Vec::new();
        for r in 0..spec.height {
            for c in 0..spec.width {
                if !spec.is_wall((r, c)) {
                    state_of[r * spec.width + c] = Some(cells.len());
                    cells.push((r, c));
                }
            }
        }
        Ok(Self {
            spec,
            state_of,
            cells,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn num_states(&self) -> usize {
        self.cells.len()
    }

    pub fn dims(&self, horizon: usize) -> Result<SpaceDims> {
        SpaceDims::new(self.num_states(), NUM_ACTIONS, horizon)
    }

    pub fn state(&self, (r, c): Cell) -> Option<usize> {
        if r < self.spec.height && c < self.spec.width {
            self.state_of[r * self.spec.width + c]
        } else {
            None
        }
    }

    pub fn cell(&self, state: usize) -> Cell {
        self.cells[state]
    }

    pub fn start_state(&self) -> usize {
        self.state(self.spec.start).expect("validated start cell")
    }

    fn neighbor(&self, (r, c): Cell, dir: usize) -> Option<usize> {
        let (dr, dc) = OFFSETS[dir];
        let nr = r.checked_add_signed(dr)?;
        let nc = c.checked_add_signed(dc)?;
        self.state((nr, nc))
    }

    fn open_neighbors(&self, state: usize) -> Vec<usize> {
        let cell = self.cell(state);
        (0..4).filter_map(|d| self.neighbor(cell, d)).collect()
    }

    /// Next-state distribution of one `(state, action)` pair.
    pub fn transition_row(&self, state: usize, action: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.num_states()];
        let dest = if action == STAY {
            state
        } else {
            self.neighbor(self.cell(state), action).unwrap_or(state)
        };
        let noisy = action != STAY || self.spec.noisy_stay;
        let around = if noisy && self.spec.noise > 0.0 {
            self.open_neighbors(dest)
        } else {
            Vec::new()
        };
        if around.is_empty() {
            row[dest] = 1.0;
        } else {
            row[dest] = 1.0 - self.spec.noise;
            let share = self.spec.noise / around.len() as f64;
            for s in around {
                row[s] += share;
            }
        }
        row
    }

    /// Stationary kernel over `horizon` steps and the target distribution,
    /// a point mass on `(start, initial_action)`.
    pub fn kernel(&self, horizon: usize, initial_action: usize) -> Result<(TransitionKernel, Distribution)> {
        if initial_action >= NUM_ACTIONS {
            return Err(Error::Config(format!("initial action {initial_action} out of range")));
        }
        let dims = self.dims(horizon)?;
        let mut base = Vec::with_capacity(dims.pairs() * dims.num_states);
        for x in 0..dims.num_states {
            for a in 0..NUM_ACTIONS {
                base.extend(self.transition_row(x, a));
            }
        }
        let kernel = TransitionKernel::stationary(dims, &base)?;
        let rho = Distribution::dirac(dims.pairs(), dims.pair(self.start_state(), initial_action));
        Ok((kernel, rho))
    }

    /// `1` on every action of the listed cells, `0` elsewhere.
    pub fn indicator(&self, cells: &[Cell]) -> Vec<f64> {
        let mut v = vec![0.0; self.num_states() * NUM_ACTIONS];
        for &cell in cells {
            if let Some(s) = self.state(cell) {
                v[s * NUM_ACTIONS..(s + 1) * NUM_ACTIONS].fill(1.0);
            }
        }
        v
    }

    /// Per-state mass of a state-action distribution laid out on the grid
    /// (walls are `NaN`).
    pub fn state_heatmap(&self, dist: &Distribution) -> Vec<f64> {
        let marginal = dist.state_marginal(NUM_ACTIONS);
        let mut grid = vec![f64::NAN; self.spec.width * self.spec.height];
        for (s, &(r, c)) in self.cells.iter().enumerate() {
            grid[r * self.spec.width + c] = marginal[s];
        }
        grid
    }
}

/// Kernel and target of a gridworld with `rho = (start, stay)`.
pub fn four_room_kernel(spec: &GridSpec, horizon: usize) -> Result<(TransitionKernel, Distribution)> {
    GridWorld::new(spec.clone())?.kernel(horizon, STAY)
}

pub const FOUR_ROOMS_MAP: &str = "\
S....#.....
.....#.....
.....D.....
.....#.....
.....#.....
##D#####D##
.....#.....
.....#.....
.....D.....
.....#.....
.....#.....
";

pub const FOUR_ROOMS_OBSTACLES_MAP: &str = "\
S....#.....
.....#.....
.....D.....
.....#.....
.....#.....
##D#####D##
.....#.....
.....#..C..
.....D.C...
.....#...T.
.....#.....
";

pub const TWO_ROOMS_MAP: &str = "\
S..#...
...#...
...#...
...D...
...#...
...#...
...#...
";

pub const TWO_ROOMS_OBSTACLES_MAP: &str = "\
S..#...
...#...
...#C..
...D.T.
...#C..
...#...
...#...
";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    MaxEntropy,
    Obstacles,
    MaxEntropySmall,
    ObstaclesSmall,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    MaxEntropy,
    Obstacles,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::MaxEntropy,
        Preset::Obstacles,
        Preset::MaxEntropySmall,
        Preset::ObstaclesSmall,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::MaxEntropy => "max-entropy",
            Preset::Obstacles => "obstacles",
            Preset::MaxEntropySmall => "max-entropy-small",
            Preset::ObstaclesSmall => "obstacles-small",
        }
    }

    pub fn map(self) -> &'static str {
        match self {
            Preset::MaxEntropy => FOUR_ROOMS_MAP,
            Preset::Obstacles => FOUR_ROOMS_OBSTACLES_MAP,
            Preset::MaxEntropySmall => TWO_ROOMS_MAP,
            Preset::ObstaclesSmall => TWO_ROOMS_OBSTACLES_MAP,
        }
    }

    pub fn horizon(self) -> usize {
        match self {
            Preset::MaxEntropy => 40,
            Preset::Obstacles => 80,
            Preset::MaxEntropySmall => 20,
            Preset::ObstaclesSmall => 30,
        }
    }

    pub fn objective(self) -> ObjectiveKind {
        match self {
            Preset::MaxEntropy | Preset::MaxEntropySmall => ObjectiveKind::MaxEntropy,
            Preset::Obstacles | Preset::ObstaclesSmall => ObjectiveKind::Obstacles,
        }
    }

    pub fn grid(self, noise: f64) -> Result<GridSpec> {
        GridSpec::parse_map(self.map(), noise)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))
    }
}

/// Per-step convex loss `f_{t,n}` on a state-action distribution.
///
/// `episode` is 1-based; `step` ranges over `1..=N`.
pub trait Objective: Send + Sync + fmt::Debug {
    fn value(&self, episode: usize, step: usize, slice: &[f64]) -> f64;

    fn gradient(&self, episode: usize, step: usize, slice: &[f64], out: &mut [f64]);

    /// Lipschitz constant with respect to the L1 norm.
    fn lipschitz(&self) -> f64;

    /// True when the loss does not depend on the episode index.
    fn is_stationary(&self) -> bool {
        false
    }
}

/// `F_t(mu) = sum_{n=1}^N f_{t,n}(mu_n)`.
pub fn total_loss(objective: &dyn Objective, episode: usize, mu: &OccupancyMeasure) -> f64 {
    (1..=mu.dims().horizon)
        .map(|n| objective.value(episode, n, mu.slice(n).mass()))
        .sum()
}

/// Gradient of `F_t` at `mu`; slice 0 is zero.
pub fn loss_gradient(objective: &dyn Objective, episode: usize, mu: &OccupancyMeasure) -> StageValues {
    let dims = mu.dims();
    let mut g = StageValues::zeros(dims);
    for n in 1..=dims.horizon {
        objective.gradient(episode, n, mu.slice(n).mass(), g.slice_mut(n));
    }
    g
}

pub const DEFAULT_ENTROPY_FLOOR: f64 = 1e-12;

/// Negative entropy `<mu, log max(mu, floor)>`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyObjective {
    floor: f64,
}

pub fn entropy_objective(floor: f64) -> Result<EntropyObjective> {
    if !(floor > 0.0 && floor < 1.0) {
        return Err(Error::Config(format!("entropy floor must lie in (0, 1), got {floor}")));
    }
    Ok(EntropyObjective { floor })
}

impl Objective for EntropyObjective {
    fn is_stationary(&self) -> bool {
        true
    }

    fn value(&self, _episode: usize, _step: usize, slice: &[f64]) -> f64 {
        slice.iter().map(|&m| m * m.max(self.floor).ln()).sum()
    }

    fn gradient(&self, _episode: usize, _step: usize, slice: &[f64], out: &mut [f64]) {
        for (o, &m) in out.iter_mut().zip(slice) {
            *o = if m > self.floor { m.ln() + 1.0 } else { self.floor.ln() };
        }
    }

    fn lipschitz(&self) -> f64 {
        self.floor.ln().abs() + 1.0
    }
}

/// `-<r, mu> + <c, mu>^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObstacleObjective {
    reward: Vec<f64>,
    cost: Vec<f64>,
}

/// Obstacle objective with indicators on every action of the listed states.
pub fn obstacle_objective(
    dims: SpaceDims,
    target_states: &[usize],
    constraint_states: &[usize],
) -> Result<ObstacleObjective> {
    let indicator = |states: &[usize]| -> Result<Vec<f64>> {
        let mut v = vec![0.0; dims.pairs()];
        for &s in states {
            if s >= dims.num_states {
                return Err(Error::Config(format!("state {s} out of range")));
            }
            v[s * dims.num_actions..(s + 1) * dims.num_actions].fill(1.0);
        }
        Ok(v)
    };
    if target_states.iter().any(|s| constraint_states.contains(s)) {
        return Err(Error::Config("target and constraint states overlap".into()));
    }
    Ok(ObstacleObjective {
        reward: indicator(target_states)?,
        cost: indicator(constraint_states)?,
    })
}

impl Objective for ObstacleObjective {
    fn is_stationary(&self) -> bool {
        true
    }

    fn value(&self, _episode: usize, _step: usize, slice: &[f64]) -> f64 {
        let (mut r, mut c) = (0.0, 0.0);
        for ((&m, &ri), &ci) in slice.iter().zip(&self.reward).zip(&self.cost) {
            r += ri * m;
            c += ci * m;
        }
        -r + c * c
    }

    fn gradient(&self, _episode: usize, _step: usize, slice: &[f64], out: &mut [f64]) {
        let c: f64 = slice.iter().zip(&self.cost).map(|(m, ci)| m * ci).sum();
        for ((o, &ri), &ci) in out.iter_mut().zip(&self.reward).zip(&self.cost) {
            *o = -ri + 2.0 * c * ci;
        }
    }

    fn lipschitz(&self) -> f64 {
        let r_max = self.reward.iter().cloned().fold(0.0, f64::max);
        let c_sum: f64 = self.cost.iter().sum();
        (r_max + 2.0 * c_sum).max(f64::MIN_POSITIVE)
    }
}

/// Fixed linear losses `<l_n, mu_n>`; the zero objective is `LinearObjective::zeros`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearObjective {
    losses: StageValues,
}

impl LinearObjective {
    pub fn new(losses: StageValues) -> Self {
        Self { losses }
    }

    pub fn zeros(dims: SpaceDims) -> Self {
        Self::new(StageValues::zeros(dims))
    }
}

impl Objective for LinearObjective {
    fn is_stationary(&self) -> bool {
        true
    }

    fn value(&self, _episode: usize, step: usize, slice: &[f64]) -> f64 {
        self.losses.slice(step).iter().zip(slice).map(|(l, m)| l * m).sum()
    }

    fn gradient(&self, _episode: usize, step: usize, _slice: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.losses.slice(step));
    }

    fn lipschitz(&self) -> f64 {
        self.losses
            .as_slice()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1.0)
    }
}

/// Preset environment bundled with its objective.
#[derive(Debug)]
pub struct Environment {
    pub world: GridWorld,
    pub kernel: TransitionKernel,
    pub rho: Distribution,
    pub objective: Box<dyn Objective>,
}

impl Environment {
    pub fn dims(&self) -> SpaceDims {
        self.kernel.dims()
    }

    pub fn from_spec(spec: GridSpec, horizon: usize, kind: ObjectiveKind, floor: f64) -> Result<Self> {
        let world = GridWorld::new(spec)?;
        let (kernel, rho) = world.kernel(horizon, STAY)?;
        let objective: Box<dyn Objective> = match kind {
            ObjectiveKind::MaxEntropy => Box::new(entropy_objective(floor)?),
            ObjectiveKind::Obstacles => {
                let states = |cells: &[Cell]| -> Vec<usize> {
                    cells.iter().filter_map(|&c| world.state(c)).collect()
                };
                let spec = world.spec();
                if spec.targets.is_empty() {
                    return Err(Error::Config("obstacle objective needs at least one target cell".into()));
                }
                Box::new(obstacle_objective(
                    kernel.dims(),
                    &states(&spec.targets),
                    &states(&spec.constraints),
                )?)
            }
        };
        Ok(Self {
            world,
            kernel,
            rho,
            objective,
        })
    }

    pub fn preset(preset: Preset, noise: f64) -> Result<Self> {
        Self::from_spec(preset.grid(noise)?, preset.horizon(), preset.objective(), DEFAULT_ENTROPY_FLOOR)
    }
}
