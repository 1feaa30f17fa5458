//! Desk-scale grid scenarios with a shared team reward.
//!
//! Four scenario families are supported: level-based foraging with a single
//! guarded food (`lbf1`) or four corner foods (`lbf4`), grid predator-prey
//! (`grid_pp`) and grid cooperative navigation (`grid_cn`). All agents move
//! simultaneously; moves into walls, alive foods or preys, or conflicting
//! with another agent's move leave the agent in place.

pub mod oracle;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(x, y)` grid coordinate; `x` grows to the right, `y` grows downwards.
pub type Cell = (i32, i32);

pub const N_ACTIONS: usize = 5;
pub const ACTION_NAMES: [&str; N_ACTIONS] = ["up", "down", "left", "right", "stay"];
pub const STAY: usize = 4;
/// Penalty per pair of agents whose moves collided (cooperative navigation).
pub const COLLISION_PENALTY: f64 = 0.1;

#[inline]
fn offset(action: usize) -> Cell {
    match action {
        0 => (0, -1),
        1 => (0, 1),
        2 => (-1, 0),
        3 => (1, 0),
        _ => (0, 0),
    }
}

#[inline]
pub fn manhattan(a: Cell, b: Cell) -> i32 {
    (a.0 - b.0).abs() + (a.1 - b.1).abs()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Lbf1,
    Lbf4,
    GridPp,
    GridCn,
}

impl Scenario {
    fn is_lbf(self) -> bool {
        matches!(self, Scenario::Lbf1 | Scenario::Lbf4)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreyBehavior {
    #[default]
    RandomWalk,
    /// Greedy move maximising distance to the nearest predator; ties go to
    /// the lowest action index.
    FleeNearest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoodSpec {
    pub cell: Cell,
    pub level: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioParams {
    /// Agents are placed on distinct cells drawn from this set.
    pub spawn_cells: Vec<Cell>,
    #[serde(default)]
    pub foods: Vec<FoodSpec>,
    #[serde(default)]
    pub agent_levels: Vec<u32>,
    /// Number of earlier timesteps on which some pair of agents must have been
    /// within one cell of each other before a food can be collected.
    #[serde(default)]
    pub required_adjacency: u32,
    /// Initial prey cells; the prey count is the length of this list.
    #[serde(default)]
    pub prey_cells: Vec<Cell>,
    #[serde(default)]
    pub prey_behavior: PreyBehavior,
    #[serde(default)]
    pub landmarks: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub scenario: Scenario,
    pub width: i32,
    pub height: i32,
    pub n_agents: usize,
    /// Number of controllable (ego) agents; they occupy slots `0..n_ego`.
    pub n_ego: usize,
    pub horizon: usize,
    pub params: ScenarioParams,
}

impl EnvSpec {
    /// Named desk presets: `lbf1`, `lbf4`, `pp1`, `pp2`, `cn2`, `cn3`.
    pub fn preset(name: &str) -> Result<EnvSpec> {
        let spec = match name {
            "lbf1" => EnvSpec {
                scenario: Scenario::Lbf1,
                width: 5,
                height: 5,
                n_agents: 2,
                n_ego: 1,
                horizon: 20,
                params: ScenarioParams {
                    spawn_cells: vec![(0, 0), (0, 1), (1, 0), (1, 1)],
                    foods: vec![FoodSpec { cell: (4, 4), level: 2 }],
                    agent_levels: vec![1, 1],
                    required_adjacency: 2,
                    ..Default::default()
                },
            },
            "lbf4" => EnvSpec {
                scenario: Scenario::Lbf4,
                width: 6,
                height: 6,
                n_agents: 2,
                n_ego: 1,
                horizon: 12,
                params: ScenarioParams {
                    spawn_cells: vec![(2, 2), (2, 3), (3, 2), (3, 3)],
                    foods: [(0, 0), (0, 5), (5, 0), (5, 5)]
                        .iter()
                        .map(|&cell| FoodSpec { cell, level: 2 })
                        .collect(),
                    agent_levels: vec![1, 1],
                    ..Default::default()
                },
            },
            "pp1" | "pp2" => EnvSpec {
                scenario: Scenario::GridPp,
                width: 7,
                height: 7,
                n_agents: 2,
                n_ego: 1,
                horizon: 25,
                params: ScenarioParams {
                    spawn_cells: vec![(3, 3), (2, 3), (4, 3), (3, 2), (3, 4)],
                    prey_cells: if name == "pp1" {
                        vec![(0, 0), (6, 0), (3, 6)]
                    } else {
                        vec![(0, 0), (6, 0), (0, 6), (6, 6), (3, 0)]
                    },
                    prey_behavior: if name == "pp1" {
                        PreyBehavior::RandomWalk
                    } else {
                        PreyBehavior::FleeNearest
                    },
                    ..Default::default()
                },
            },
            "cn2" => EnvSpec {
                scenario: Scenario::GridCn,
                width: 5,
                height: 5,
                n_agents: 2,
                n_ego: 1,
                horizon: 10,
                params: ScenarioParams {
                    spawn_cells: vec![(2, 1), (2, 2), (2, 3)],
                    landmarks: vec![(0, 2), (4, 2)],
                    ..Default::default()
                },
            },
            "cn3" => EnvSpec {
                scenario: Scenario::GridCn,
                width: 5,
                height: 5,
                n_agents: 3,
                n_ego: 2,
                horizon: 10,
                params: ScenarioParams {
                    spawn_cells: vec![(1, 2), (2, 2), (3, 2), (2, 1)],
                    landmarks: vec![(0, 0), (4, 0), (2, 4)],
                    ..Default::default()
                },
            },
            other => return Err(Error::InvalidConfig(format!("unknown environment preset `{other}`"))),
        };
        Ok(spec)
    }

    fn in_grid(&self, c: Cell) -> bool {
        c.0 >= 0 && c.1 >= 0 && c.0 < self.width && c.1 < self.height
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.width < 1 || self.height < 1 {
            return bad("grid must be at least 1x1");
        }
        if self.n_agents == 0 || self.n_ego == 0 || self.n_ego > self.n_agents {
            return bad("need 1 <= n_ego <= n_agents");
        }
        if self.horizon == 0 {
            return bad("horizon must be >= 1");
        }
        let p = &self.params;
        let cells = p
            .spawn_cells
            .iter()
            .chain(p.foods.iter().map(|f| &f.cell))
            .chain(&p.prey_cells)
            .chain(&p.landmarks);
        if cells.into_iter().any(|&c| !self.in_grid(c)) {
            return bad("scenario cell outside the grid");
        }
        if p.spawn_cells.len() < self.n_agents {
            return bad("fewer spawn cells than agents");
        }
        let mut spawns = p.spawn_cells.clone();
        spawns.sort_unstable();
        spawns.dedup();
        if spawns.len() != p.spawn_cells.len() {
            return bad("duplicate spawn cells");
        }
        match self.scenario {
            Scenario::Lbf1 | Scenario::Lbf4 => {
                if p.foods.is_empty() {
                    return bad("foraging scenario needs at least one food");
                }
                if p.agent_levels.len() != self.n_agents {
                    return bad("agent_levels must have one entry per agent");
                }
                if p.foods.iter().any(|f| p.spawn_cells.contains(&f.cell)) {
                    return bad("food placed on a spawn cell");
                }
            }
            Scenario::GridPp => {
                if p.prey_cells.is_empty() {
                    return bad("predator-prey scenario needs at least one prey");
                }
                if p.prey_cells.iter().any(|c| p.spawn_cells.contains(c)) {
                    return bad("prey placed on a spawn cell");
                }
            }
            Scenario::GridCn => {
                if p.landmarks.len() != self.n_agents {
                    return bad("cooperative navigation needs one landmark per agent");
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entity {
    pub cell: Cell,
    pub alive: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvState {
    pub agent_cells: Vec<Cell>,
    /// Foods, preys or landmarks depending on the scenario.
    pub entities: Vec<Entity>,
    pub step: usize,
    /// Earlier timesteps (including the spawn state) on which some pair of
    /// agents was within one cell of each other.
    pub adjacency_count: u32,
    pub done: bool,
}

/// One observation vector per agent.
pub type JointObservation = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_obs: JointObservation,
    pub reward: f64,
    pub done: bool,
}

/// A validated scenario ready to be reset and stepped.
#[derive(Clone, Debug)]
pub struct EnvInstance {
    spec: EnvSpec,
    obs_dim: usize,
}

pub fn make_env(spec: EnvSpec) -> Result<EnvInstance> {
    spec.validate()?;
    let n_entities = match spec.scenario {
        Scenario::Lbf1 | Scenario::Lbf4 => spec.params.foods.len(),
        Scenario::GridPp => spec.params.prey_cells.len(),
        Scenario::GridCn => spec.params.landmarks.len(),
    };
    let adjacency_feature = usize::from(spec.params.required_adjacency > 0);
    // own cell, other agents, entities (x, y, alive), adjacency progress, time, agent one-hot
    let obs_dim = 2 + 2 * (spec.n_agents - 1) + 3 * n_entities + adjacency_feature + 1 + spec.n_agents;
    Ok(EnvInstance { spec, obs_dim })
}

impl EnvInstance {
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    pub fn n_agents(&self) -> usize {
        self.spec.n_agents
    }

    pub fn n_ego(&self) -> usize {
        self.spec.n_ego
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    /// Upper bound on the undiscounted episode return.
    pub fn max_entities(&self) -> usize {
        match self.spec.scenario {
            Scenario::Lbf1 | Scenario::Lbf4 => self.spec.params.foods.len(),
            Scenario::GridPp => self.spec.params.prey_cells.len(),
            Scenario::GridCn => self.spec.params.landmarks.len(),
        }
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> (EnvState, JointObservation) {
        let spawns = &self.spec.params.spawn_cells;
        let picks = rand::seq::index::sample(rng, spawns.len(), self.spec.n_agents);
        let agent_cells: Vec<Cell> = picks.iter().map(|i| spawns[i]).collect();
        let p = &self.spec.params;
        let entities = match self.spec.scenario {
            Scenario::Lbf1 | Scenario::Lbf4 => p.foods.iter().map(|f| f.cell).collect::<Vec<_>>(),
            Scenario::GridPp => p.prey_cells.clone(),
            Scenario::GridCn => p.landmarks.clone(),
        }
        .into_iter()
        .map(|cell| Entity { cell, alive: true })
        .collect();
        let mut state = EnvState {
            agent_cells,
            entities,
            step: 0,
            adjacency_count: 0,
            done: false,
        };
        if self.any_pair_adjacent(&state.agent_cells) {
            state.adjacency_count = 1;
        }
        let obs = self.observe(&state);
        (state, obs)
    }

    fn any_pair_adjacent(&self, cells: &[Cell]) -> bool {
        cells
            .iter()
            .enumerate()
            .any(|(i, &a)| cells[i + 1..].iter().any(|&b| manhattan(a, b) <= 1))
    }

    fn blocked_by_entity(&self, state: &EnvState, c: Cell) -> bool {
        match self.spec.scenario {
            Scenario::GridCn => false,
            _ => state.entities.iter().any(|e| e.alive && e.cell == c),
        }
    }

    /// Resolve simultaneous moves. Returns the new cells and the unordered
    /// pairs of agents whose moves conflicted.
    fn resolve_moves(&self, state: &EnvState, actions: &[usize]) -> (Vec<Cell>, Vec<(usize, usize)>) {
        let cells = &state.agent_cells;
        let n = cells.len();
        let mut targets: Vec<Cell> = cells
            .iter()
            .zip(actions)
            .map(|(&c, &a)| {
                let d = offset(a);
                let t = (c.0 + d.0, c.1 + d.1);
                if self.spec.in_grid(t) && !self.blocked_by_entity(state, t) {
                    t
                } else {
                    c
                }
            })
            .collect();
        let mut collisions = Vec::new();
        loop {
            let mut revert = vec![false; n];
            for i in 0..n {
                if targets[i] == cells[i] {
                    continue;
                }
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let same_target = targets[j] == targets[i];
                    let into_staying = targets[j] == cells[j] && cells[j] == targets[i];
                    let swap = targets[j] == cells[i] && targets[i] == cells[j];
                    if same_target || into_staying || swap {
                        revert[i] = true;
                        let pair = (i.min(j), i.max(j));
                        if !collisions.contains(&pair) {
                            collisions.push(pair);
                        }
                    }
                }
            }
            if !revert.iter().any(|&r| r) {
                break;
            }
            for i in 0..n {
                if revert[i] {
                    targets[i] = cells[i];
                }
            }
        }
        (targets, collisions)
    }

    fn move_preys<R: Rng + ?Sized>(&self, state: &mut EnvState, rng: &mut R) {
        for k in 0..state.entities.len() {
            if !state.entities[k].alive {
                continue;
            }
            let here = state.entities[k].cell;
            let free = |c: Cell, st: &EnvState| {
                self.spec.in_grid(c)
                    && !st.agent_cells.contains(&c)
                    && !st.entities.iter().enumerate().any(|(o, e)| o != k && e.alive && e.cell == c)
            };
            let dest = match self.spec.params.prey_behavior {
                PreyBehavior::RandomWalk => {
                    let d = offset(rng.gen_range(0..N_ACTIONS));
                    let t = (here.0 + d.0, here.1 + d.1);
                    if free(t, state) {
                        t
                    } else {
                        here
                    }
                }
                PreyBehavior::FleeNearest => {
                    let nearest = |c: Cell| state.agent_cells.iter().map(|&a| manhattan(a, c)).min().unwrap_or(0);
                    let mut best = here;
                    let mut best_d = i32::MIN;
                    for a in 0..N_ACTIONS {
                        let d = offset(a);
                        let t = (here.0 + d.0, here.1 + d.1);
                        if t != here && !free(t, state) {
                            continue;
                        }
                        let dist = nearest(t);
                        if dist > best_d {
                            best_d = dist;
                            best = t;
                        }
                    }
                    best
                }
            };
            state.entities[k].cell = dest;
        }
    }

    /// Advance `state` by one joint action.
    pub fn step<R: Rng + ?Sized>(&self, state: &mut EnvState, joint_action: &[usize], rng: &mut R) -> Result<StepResult> {
        if state.done {
            return Err(Error::TerminalState);
        }
        if joint_action.len() != self.spec.n_agents {
            return Err(Error::DimensionMismatch {
                context: "joint action",
                expected: self.spec.n_agents,
                got: joint_action.len(),
            });
        }
        if let Some(&a) = joint_action.iter().find(|&&a| a >= N_ACTIONS) {
            return Err(Error::InvalidArgument(format!("action index {a} out of range")));
        }
        let (cells, collisions) = self.resolve_moves(state, joint_action);
        state.agent_cells = cells;
        state.step += 1;
        let mut reward = 0.0;
        match self.spec.scenario {
            Scenario::Lbf1 | Scenario::Lbf4 => {
                let p = &self.spec.params;
                let unlocked = state.adjacency_count >= p.required_adjacency;
                for (food, e) in p.foods.iter().zip(state.entities.iter_mut()) {
                    if !e.alive || !unlocked {
                        continue;
                    }
                    let level: u32 = state
                        .agent_cells
                        .iter()
                        .zip(&p.agent_levels)
                        .filter(|(&c, _)| manhattan(c, e.cell) <= 1)
                        .map(|(_, &l)| l)
                        .sum();
                    if level >= food.level {
                        e.alive = false;
                        reward += 1.0;
                    }
                }
                if self.any_pair_adjacent(&state.agent_cells) {
                    state.adjacency_count += 1;
                }
            }
            Scenario::GridPp => {
                for e in state.entities.iter_mut().filter(|e| e.alive) {
                    if state.agent_cells.iter().all(|&c| manhattan(c, e.cell) <= 1) {
                        e.alive = false;
                        reward += 1.0;
                    }
                }
                self.move_preys(state, rng);
            }
            Scenario::GridCn => {
                let covered = state
                    .entities
                    .iter()
                    .all(|e| state.agent_cells.iter().filter(|&&c| c == e.cell).count() == 1);
                if covered {
                    reward += 1.0;
                }
                reward -= COLLISION_PENALTY * collisions.len() as f64;
            }
        }
        let consumed = self.spec.scenario != Scenario::GridCn && state.entities.iter().all(|e| !e.alive);
        state.done = consumed || state.step >= self.spec.horizon;
        Ok(StepResult {
            next_obs: self.observe(state),
            reward,
            done: state.done,
        })
    }

    pub fn observe(&self, state: &EnvState) -> JointObservation {
        (0..self.spec.n_agents).map(|i| self.observe_agent(state, i)).collect()
    }

    fn observe_agent(&self, state: &EnvState, agent: usize) -> Vec<f64> {
        let sx = (self.spec.width - 1).max(1) as f64;
        let sy = (self.spec.height - 1).max(1) as f64;
        let mut o = Vec::with_capacity(self.obs_dim);
        let own = state.agent_cells[agent];
        o.push(own.0 as f64 / sx);
        o.push(own.1 as f64 / sy);
        for (j, c) in state.agent_cells.iter().enumerate() {
            if j != agent {
                o.push(c.0 as f64 / sx);
                o.push(c.1 as f64 / sy);
            }
        }
        for e in &state.entities {
            o.push(e.cell.0 as f64 / sx);
            o.push(e.cell.1 as f64 / sy);
            o.push(if e.alive { 1.0 } else { 0.0 });
        }
        let req = self.spec.params.required_adjacency;
        if req > 0 {
            o.push(state.adjacency_count.min(req) as f64 / req as f64);
        }
        o.push(state.step as f64 / self.spec.horizon as f64);
        for j in 0..self.spec.n_agents {
            o.push(if j == agent { 1.0 } else { 0.0 });
        }
        debug_assert_eq!(o.len(), self.obs_dim);
        o
    }

    /// Step reward bounds `[min, max]`.
    pub fn reward_bounds(&self) -> (f64, f64) {
        let n = self.spec.n_agents as f64;
        let lo = if self.spec.scenario == Scenario::GridCn {
            -COLLISION_PENALTY * n * (n - 1.0) / 2.0
        } else {
            0.0
        };
        (lo, self.max_entities() as f64)
    }

    pub fn is_foraging(&self) -> bool {
        self.spec.scenario.is_lbf()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn env(name: &str) -> EnvInstance {
        make_env(EnvSpec::preset(name).unwrap()).unwrap()
    }

    fn state_with(env: &EnvInstance, agents: Vec<Cell>) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut s, _) = env.reset(&mut rng);
        s.agent_cells = agents;
        s
    }

    #[test]
    fn presets_match_scenario_layouts() {
        let e = env("lbf1");
        assert_eq!((e.spec().width, e.spec().height, e.n_agents()), (5, 5, 2));
        assert_eq!(e.spec().params.foods[0].cell, (4, 4));
        let e = env("lbf4");
        assert_eq!((e.spec().width, e.spec().height), (6, 6));
        let cells: Vec<Cell> = e.spec().params.foods.iter().map(|f| f.cell).collect();
        assert_eq!(cells, vec![(0, 0), (0, 5), (5, 0), (5, 5)]);
        let e = env("cn3");
        assert_eq!((e.n_agents(), e.n_ego(), e.spec().params.landmarks.len()), (3, 2, 3));
        assert!(EnvSpec::preset("smac1").is_err());
    }

    #[test]
    fn reset_spawns_on_distinct_spawn_cells() {
        for name in ["lbf1", "lbf4"] {
            let e = env(name);
            for seed in 0..50 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (s, obs) = e.reset(&mut rng);
                assert!(s.agent_cells.iter().all(|c| e.spec().params.spawn_cells.contains(c)));
                assert_ne!(s.agent_cells[0], s.agent_cells[1]);
                assert!(obs.iter().all(|o| o.len() == e.obs_dim()));
            }
        }
        let e = env("lbf4");
        let a = e.reset(&mut ChaCha8Rng::seed_from_u64(9));
        let b = e.reset(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn lbf4_joint_collection() {
        let e = env("lbf4");
        let mut s = state_with(&e, vec![(0, 2), (2, 0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // up / left moves agents to (0,1) and (1,0)
        let r = e.step(&mut s, &[0, 2], &mut rng).unwrap();
        assert_eq!(s.agent_cells, vec![(0, 1), (1, 0)]);
        assert_eq!(r.reward, 1.0);
        assert!(!s.entities[0].alive);
        assert!(!r.done);
    }

    #[test]
    fn lbf_single_agent_cannot_lift_level_two_food() {
        let e = env("lbf4");
        let mut s = state_with(&e, vec![(0, 2), (3, 3)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = e.step(&mut s, &[0, STAY], &mut rng).unwrap();
        assert_eq!(r.reward, 0.0);
        assert!(s.entities[0].alive);
    }

    #[test]
    fn lbf1_requires_two_earlier_adjacent_steps() {
        let e = env("lbf1");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = state_with(&e, vec![(3, 3), (4, 2)]);
        s.adjacency_count = 1;
        // down / down: agents reach (3,4) and (4,3), both adjacent to the food
        let r = e.step(&mut s, &[1, 1], &mut rng).unwrap();
        assert_eq!(s.agent_cells, vec![(3, 4), (4, 3)]);
        assert_eq!(r.reward, 0.0);
        assert!(s.entities[0].alive);

        let mut s = state_with(&e, vec![(3, 3), (4, 2)]);
        s.adjacency_count = 2;
        let r = e.step(&mut s, &[1, 1], &mut rng).unwrap();
        assert_eq!(r.reward, 1.0);
        assert!(r.done);
    }

    #[test]
    fn conflicting_moves_both_stay() {
        let e = env("lbf4");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = state_with(&e, vec![(2, 2), (4, 2)]);
        e.step(&mut s, &[3, 2], &mut rng).unwrap();
        assert_eq!(s.agent_cells, vec![(2, 2), (4, 2)]);
        // swap
        let mut s = state_with(&e, vec![(2, 2), (3, 2)]);
        e.step(&mut s, &[3, 2], &mut rng).unwrap();
        assert_eq!(s.agent_cells, vec![(2, 2), (3, 2)]);
        // following into a vacated cell is allowed
        let mut s = state_with(&e, vec![(2, 2), (3, 2)]);
        e.step(&mut s, &[3, 3], &mut rng).unwrap();
        assert_eq!(s.agent_cells, vec![(3, 2), (4, 2)]);
        // walls
        let mut s = state_with(&e, vec![(0, 3), (5, 3)]);
        e.step(&mut s, &[2, 3], &mut rng).unwrap();
        assert_eq!(s.agent_cells, vec![(0, 3), (5, 3)]);
    }

    #[test]
    fn pp_far_predators_get_nothing_and_adjacent_pair_captures() {
        let e = env("pp1");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = state_with(&e, vec![(3, 3), (3, 4)]);
        let r = e.step(&mut s, &[STAY, STAY], &mut rng).unwrap();
        assert_eq!(r.reward, 0.0);

        let mut s = state_with(&e, vec![(1, 1), (2, 0)]);
        // both step left and end up flanking the prey at (0,0)
        let r = e.step(&mut s, &[2, 2], &mut rng).unwrap();
        assert_eq!(s.agent_cells, vec![(0, 1), (1, 0)]);
        assert_eq!(r.reward, 1.0);
        assert!(!s.entities[0].alive);
    }

    #[test]
    fn fleeing_prey_moves_away_with_lowest_index_tie_break() {
        let e = env("pp2");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = state_with(&e, vec![(3, 3), (3, 4)]);
        s.entities.iter_mut().for_each(|p| p.alive = false);
        s.entities[4] = Entity { cell: (3, 1), alive: true };
        e.step(&mut s, &[STAY, STAY], &mut rng).unwrap();
        // up, left and right all reach distance 3; up has the lowest index
        assert_eq!(s.entities[4].cell, (3, 0));
    }

    #[test]
    fn cn_reward_for_covering_and_collision_penalty() {
        let e = env("cn2");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = state_with(&e, vec![(1, 2), (3, 2)]);
        let r = e.step(&mut s, &[2, 3], &mut rng).unwrap();
        assert_eq!(r.reward, 1.0);
        let mut s = state_with(&e, vec![(1, 2), (3, 2)]);
        let r = e.step(&mut s, &[3, 2], &mut rng).unwrap();
        assert!((r.reward + COLLISION_PENALTY).abs() < 1e-12);
    }

    #[test]
    fn terminal_state_rejects_steps() {
        let e = env("cn2");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut s, _) = e.reset(&mut rng);
        for _ in 0..e.horizon() {
            e.step(&mut s, &[STAY, STAY], &mut rng).unwrap();
        }
        assert!(s.done);
        assert!(matches!(e.step(&mut s, &[STAY, STAY], &mut rng), Err(Error::TerminalState)));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = EnvSpec::preset("lbf4").unwrap();
        s.params.foods[0].cell = (9, 9);
        assert!(make_env(s).is_err());
        let mut s = EnvSpec::preset("lbf4").unwrap();
        s.params.agent_levels.pop();
        assert!(make_env(s).is_err());
        let mut s = EnvSpec::preset("cn3").unwrap();
        s.params.landmarks.pop();
        assert!(make_env(s).is_err());
        let mut s = EnvSpec::preset("pp1").unwrap();
        s.horizon = 0;
        assert!(make_env(s).is_err());
    }
}
