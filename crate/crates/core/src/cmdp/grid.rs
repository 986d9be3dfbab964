//! Hazard gridworlds.
//!
//! Cells are indexed `s = y * width + x`. Actions: 0 up (y+1), 1 down,
//! 2 left, 3 right; moving into a wall leaves the agent in place. With
//! probability `slip` the move direction is drawn uniformly from all four.
//! Entering a hazard costs `cost`. Entering the goal pays `rewards.goal`, and
//! from the goal every action respawns the agent uniformly on the cells that
//! are neither goal nor hazard.

use serde::{Deserialize, Serialize};

use super::TabularCmdp;
use crate::error::{Error, Result};

const MOVES: [(i64, i64); 4] = [(0, 1), (0, -1), (-1, 0), (1, 0)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRewards {
    #[serde(default)]
    pub step: f64,
    pub goal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub goal: [usize; 2],
    #[serde(default)]
    pub hazards: Vec<[usize; 2]>,
    /// Start cell; when absent episodes start uniformly on the respawn set.
    #[serde(default)]
    pub start: Option<[usize; 2]>,
    pub slip: f64,
    pub rewards: GridRewards,
    #[serde(default = "default_cost")]
    pub cost: f64,
    #[serde(default = "default_discount")]
    pub discount: f64,
    pub horizon: usize,
    pub d: f64,
}

fn default_cost() -> f64 {
    1.0
}

fn default_discount() -> f64 {
    0.95
}

impl GridSpec {
    /// 5×5 grid with a three-cell hazard band across the middle row. The
    /// direct route from start to goal crosses the band; the detour around
    /// either end is four steps longer.
    pub fn corridor_a() -> Self {
        Self {
            width: 5,
            height: 5,
            goal: [2, 4],
            hazards: vec![[1, 2], [2, 2], [3, 2]],
            start: Some([2, 0]),
            slip: 0.1,
            rewards: GridRewards { step: 0.0, goal: 1.0 },
            cost: 1.0,
            discount: 0.95,
            horizon: 400,
            d: 5.0,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn n_states(&self) -> usize {
        self.width * self.height
    }

    pub fn index(&self, cell: [usize; 2]) -> usize {
        cell[1] * self.width + cell[0]
    }

    pub fn is_hazard(&self, s: usize) -> bool {
        self.hazards.iter().any(|&h| self.index(h) == s)
    }

    fn in_bounds(&self, cell: [usize; 2]) -> bool {
        cell[0] < self.width && cell[1] < self.height
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("grid must be at least 1x1"));
        }
        if !self.in_bounds(self.goal) {
            return Err(Error::invalid(format!("goal {:?} is out of bounds", self.goal)));
        }
        for &h in &self.hazards {
            if !self.in_bounds(h) {
                return Err(Error::invalid(format!("hazard {h:?} is out of bounds")));
            }
            if h == self.goal {
                return Err(Error::invalid(format!("hazard {h:?} overlaps the goal")));
            }
        }
        if let Some(st) = self.start {
            if !self.in_bounds(st) {
                return Err(Error::invalid(format!("start {st:?} is out of bounds")));
            }
        }
        if !(0.0..=1.0).contains(&self.slip) {
            return Err(Error::invalid(format!("slip must lie in [0, 1], got {}", self.slip)));
        }
        if !self.rewards.step.is_finite() || !self.rewards.goal.is_finite() {
            return Err(Error::invalid("rewards must be finite"));
        }
        if !(self.cost >= 0.0) || !self.cost.is_finite() {
            return Err(Error::invalid("hazard cost must be finite and >= 0"));
        }
        Ok(())
    }

    fn step_target(&self, s: usize, dir: usize) -> usize {
        let (x, y) = ((s % self.width) as i64, (s / self.width) as i64);
        let (dx, dy) = MOVES[dir];
        let (nx, ny) = (x + dx, y + dy);
        if nx < 0 || ny < 0 || nx >= self.width as i64 || ny >= self.height as i64 {
            s
        } else {
            ny as usize * self.width + nx as usize
        }
    }
}

pub fn make_gridworld(spec: &GridSpec) -> Result<TabularCmdp> {
    spec.validate()?;
    let ns = spec.n_states();
    let na = MOVES.len();
    let goal = spec.index(spec.goal);
    let respawn: Vec<usize> = (0..ns).filter(|&s| s != goal && !spec.is_hazard(s)).collect();
    if respawn.is_empty() {
        return Err(Error::invalid("grid has no cell that is neither goal nor hazard"));
    }

    let mut p = vec![0.0; ns * na * ns];
    for s in 0..ns {
        for a in 0..na {
            let row = &mut p[(s * na + a) * ns..(s * na + a + 1) * ns];
            if s == goal {
                let w = 1.0 / respawn.len() as f64;
                for &r in &respawn {
                    row[r] += w;
                }
                continue;
            }
            row[spec.step_target(s, a)] += 1.0 - spec.slip;
            for dir in 0..na {
                row[spec.step_target(s, dir)] += spec.slip / na as f64;
            }
        }
    }

    let mut r = vec![0.0; ns * na * ns];
    let mut c = vec![0.0; ns * na * ns];
    for s in 0..ns {
        for a in 0..na {
            for s2 in 0..ns {
                let i = (s * na + a) * ns + s2;
                r[i] = spec.rewards.step + if s2 == goal && s != goal { spec.rewards.goal } else { 0.0 };
                if spec.is_hazard(s2) {
                    c[i] = spec.cost;
                }
            }
        }
    }

    let mut mu = vec![0.0; ns];
    match spec.start {
        Some(st) => mu[spec.index(st)] = 1.0,
        None => respawn.iter().for_each(|&s| mu[s] = 1.0 / respawn.len() as f64),
    }
    TabularCmdp::new(ns, na, p, r, c, spec.discount, spec.d, mu, spec.horizon)
}
