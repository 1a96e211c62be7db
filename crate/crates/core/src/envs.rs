//! Built-in worlds: chains, gridworlds and seeded random MDPs.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::rng::seeded;

/// Chain actions.
pub const STAY: usize = 0;
pub const RIGHT: usize = 1;

/// Gridworld actions.
pub const UP: usize = 0;
pub const EAST: usize = 1;
pub const DOWN: usize = 2;
pub const WEST: usize = 3;

/// States `0..n`; `STAY` keeps the state, `RIGHT` moves one step right and the
/// last state is absorbing. Reward 1 in the last state for either action.
pub fn chain(n: usize, discount: f64) -> Result<TabularMdp> {
    if n < 2 {
        return Err(Error::invalid("chain needs at least two states"));
    }
    let mut transition = vec![0.0; n * 2 * n];
    let mut reward = vec![0.0; n * 2];
    for s in 0..n {
        transition[(s * 2 + STAY) * n + s] = 1.0;
        transition[(s * 2 + RIGHT) * n + (s + 1).min(n - 1)] = 1.0;
    }
    reward[(n - 1) * 2 + STAY] = 1.0;
    reward[(n - 1) * 2 + RIGHT] = 1.0;
    TabularMdp::from_flat(n, 2, transition, reward, discount, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub start: [usize; 2],
    pub goal: [usize; 2],
    #[serde(default)]
    pub lava: Vec<[usize; 2]>,
    /// Probability that a move is replaced by a uniformly random direction.
    #[serde(default)]
    pub slip: f64,
    pub discount: f64,
}

impl GridSpec {
    pub fn cell(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
}

/// 4-connected grid. The goal pays 1 per step and is absorbing; lava is
/// absorbing with reward 0. Bumping into a wall leaves the agent in place.
pub fn gridworld(spec: &GridSpec) -> Result<TabularMdp> {
    let (w, h) = (spec.width, spec.height);
    if w == 0 || h == 0 || w * h < 2 {
        return Err(Error::invalid("gridworld needs at least two cells"));
    }
    let in_grid = |c: &[usize; 2]| c[0] < w && c[1] < h;
    if !in_grid(&spec.goal) || !in_grid(&spec.start) || !spec.lava.iter().all(in_grid) {
        return Err(Error::invalid("gridworld cell outside the grid"));
    }
    if !(0.0..=1.0).contains(&spec.slip) {
        return Err(Error::invalid("slip must lie in [0,1]"));
    }
    let n = w * h;
    let goal = spec.cell(spec.goal[0], spec.goal[1]);
    let lava: Vec<usize> = spec.lava.iter().map(|c| spec.cell(c[0], c[1])).collect();
    let step = |s: usize, dir: usize| -> usize {
        let (x, y) = (s % w, s / w);
        let (nx, ny) = match dir {
            UP => (x, y.saturating_sub(1)),
            EAST => ((x + 1).min(w - 1), y),
            DOWN => (x, (y + 1).min(h - 1)),
            _ => (x.saturating_sub(1), y),
        };
        ny * w + nx
    };
    let mut transition = vec![0.0; n * 4 * n];
    let mut reward = vec![0.0; n * 4];
    for s in 0..n {
        for a in 0..4 {
            let row = &mut transition[(s * 4 + a) * n..(s * 4 + a + 1) * n];
            if s == goal || lava.contains(&s) {
                row[s] = 1.0;
            } else {
                row[step(s, a)] += 1.0 - spec.slip;
                for dir in 0..4 {
                    row[step(s, dir)] += spec.slip / 4.0;
                }
            }
            if s == goal {
                reward[s * 4 + a] = 1.0;
            }
        }
    }
    TabularMdp::from_flat(n, 4, transition, reward, spec.discount, spec.cell(spec.start[0], spec.start[1]))
}

/// Dirichlet(1) transitions and uniform rewards.
pub fn random_mdp(n_states: usize, n_actions: usize, discount: f64, seed: u64) -> Result<TabularMdp> {
    random_mdp_with_concentration(n_states, n_actions, discount, 1.0, seed)
}

/// Transition rows drawn from a symmetric Dirichlet with the given concentration
/// (small values give near-deterministic dynamics); rewards uniform on `[0,1]`.
pub fn random_mdp_with_concentration(
    n_states: usize,
    n_actions: usize,
    discount: f64,
    concentration: f64,
    seed: u64,
) -> Result<TabularMdp> {
    if n_states == 0 || n_actions == 0 {
        return Err(Error::invalid("random MDP needs states and actions"));
    }
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::invalid(format!("concentration {concentration}: {e}")))?;
    let mut rng = seeded(seed);
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        let mut row: Vec<f64> = (0..n_states).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|p| *p /= total);
        } else {
            row[rng.random_range(0..n_states)] = 1.0;
        }
        // Absorb rounding so the row sums to 1 to machine precision.
        let drift = 1.0 - row.iter().sum::<f64>();
        let last = row.len() - 1;
        row[last] = (row[last] + drift).max(0.0);
        transition.extend(row);
    }
    let reward = (0..n_states * n_actions).map(|_| rng.random::<f64>()).collect();
    TabularMdp::from_flat(n_states, n_actions, transition, reward, discount, 0)
}

/// Which constructor an [`EnvSpec`] calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Chain,
    Gridworld,
    Random,
}

/// Flat environment description used by experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub discount: f64,
    /// Chain length or random-MDP state count.
    pub n_states: usize,
    /// Random-MDP action count.
    pub n_actions: usize,
    pub width: usize,
    pub height: usize,
    pub start: [usize; 2],
    /// Defaults to the far corner when absent.
    pub goal: Option<[usize; 2]>,
    pub lava: Vec<[usize; 2]>,
    pub slip: f64,
    pub concentration: f64,
    pub seed: u64,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            kind: EnvKind::Chain,
            discount: 0.99,
            n_states: 6,
            n_actions: 2,
            width: 5,
            height: 5,
            start: [0, 0],
            goal: None,
            lava: Vec::new(),
            slip: 0.0,
            concentration: 1.0,
            seed: 0,
        }
    }
}

/// Rendering geometry for query documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub width: usize,
    pub height: usize,
    pub goal_cells: Vec<[usize; 2]>,
    pub lava_cells: Vec<[usize; 2]>,
}

impl Geometry {
    /// `(x, y)` of a state index.
    pub fn position(&self, state: usize) -> [usize; 2] {
        [state % self.width, state / self.width]
    }
}

impl EnvSpec {
    pub fn chain(n_states: usize, discount: f64) -> Self {
        Self {
            kind: EnvKind::Chain,
            n_states,
            discount,
            ..Self::default()
        }
    }

    pub fn gridworld(width: usize, height: usize, discount: f64) -> Self {
        Self {
            kind: EnvKind::Gridworld,
            width,
            height,
            discount,
            ..Self::default()
        }
    }

    pub fn random(n_states: usize, n_actions: usize, discount: f64, seed: u64) -> Self {
        Self {
            kind: EnvKind::Random,
            n_states,
            n_actions,
            discount,
            seed,
            ..Self::default()
        }
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            width: self.width,
            height: self.height,
            start: self.start,
            goal: self.goal.unwrap_or([self.width.saturating_sub(1), self.height.saturating_sub(1)]),
            lava: self.lava.clone(),
            slip: self.slip,
            discount: self.discount,
        }
    }

    pub fn build(&self) -> Result<TabularMdp> {
        match self.kind {
            EnvKind::Chain => chain(self.n_states, self.discount),
            EnvKind::Gridworld => gridworld(&self.grid_spec()),
            EnvKind::Random => random_mdp_with_concentration(
                self.n_states,
                self.n_actions,
                self.discount,
                self.concentration,
                self.seed,
            ),
        }
    }

    pub fn geometry(&self) -> Geometry {
        match self.kind {
            EnvKind::Gridworld => {
                let g = self.grid_spec();
                Geometry {
                    width: g.width,
                    height: g.height,
                    goal_cells: vec![g.goal],
                    lava_cells: g.lava,
                }
            }
            EnvKind::Chain => Geometry {
                width: self.n_states,
                height: 1,
                goal_cells: vec![[self.n_states.saturating_sub(1), 0]],
                lava_cells: Vec::new(),
            },
            EnvKind::Random => Geometry {
                width: self.n_states,
                height: 1,
                goal_cells: Vec::new(),
                lava_cells: Vec::new(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::value_iteration;

    #[test]
    fn gridworld_goal_is_absorbing_and_rewarding() {
        let spec = GridSpec {
            width: 3,
            height: 2,
            start: [0, 0],
            goal: [2, 1],
            lava: vec![[1, 1]],
            slip: 0.0,
            discount: 0.9,
        };
        let mdp = gridworld(&spec).unwrap();
        let goal = spec.cell(2, 1);
        let lava = spec.cell(1, 1);
        for a in 0..4 {
            assert_eq!(mdp.transition_row(goal, a)[goal], 1.0);
            assert_eq!(mdp.transition_row(lava, a)[lava], 1.0);
            assert_eq!(mdp.reward(goal, a), 1.0);
        }
        assert_eq!(mdp.transition_row(0, WEST)[0], 1.0);
        assert_eq!(mdp.transition_row(0, EAST)[1], 1.0);
        let vt = value_iteration(&mdp, 1e-10).unwrap();
        // Start (0,0) is three moves from the goal.
        assert!((vt.v[0] - 0.9f64.powi(3) * 10.0).abs() < 1e-8);
    }

    #[test]
    fn slip_rows_stay_stochastic() {
        let mut spec = EnvSpec::gridworld(4, 4, 0.95);
        spec.slip = 0.2;
        let mdp = spec.build().unwrap();
        assert!(!mdp.is_deterministic());
    }

    #[test]
    fn random_mdp_is_seeded() {
        let a = random_mdp(7, 3, 0.9, 42).unwrap();
        let b = random_mdp(7, 3, 0.9, 42).unwrap();
        let c = random_mdp(7, 3, 0.9, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
