//! Sequential vehicle-selection MDP.
//!
//! One action picks one not-yet-selected vehicle inside the `r0` radius of
//! the fleet's median position. Each pick earns a cost term (the picked vehicle's
//! reputation and time cost, averaged over the running selection size and
//! scaled by `cost_scale`) plus reputation shaping:
//!
//! * `+1` for a vehicle at or above `high_rep_threshold`;
//! * `-1` for a vehicle below it;
//! * `-10` instead of `-1` when that makes `low_streak_limit` low picks in a
//!   row, which ends the episode;
//! * an extra `+20` when the high-reputation picks reach `group_cap`, which
//!   also ends the episode.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::costs::{rol_cost, time_cost, NodeResources, RolForm};
use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::scene::Xy;

pub const HIGH_PICK_BONUS: f64 = 1.0;
pub const LOW_PICK_PENALTY: f64 = -1.0;
pub const LOW_STREAK_PENALTY: f64 = -10.0;
pub const GROUP_FULL_BONUS: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub n_vehicles: usize,
    pub high_rep_threshold: f64,
    /// High-reputation picks that fill the group; `0` means `⌈n/2⌉`.
    pub group_cap: usize,
    /// Radius around the fleet's median position, meters.
    pub r0: f64,
    pub gamma_discount: f64,
    /// CPU cycles per training sample.
    pub beta_m: f64,
    /// Step limit per episode; `0` means `n_vehicles`.
    pub horizon: usize,
    pub cost_scale: f64,
    pub low_streak_limit: u32,
    /// Relative jitter applied to rates at every reset.
    pub rate_jitter: f64,
    pub rol_form: RolForm,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_vehicles: 20,
            high_rep_threshold: 0.5,
            group_cap: 0,
            r0: 200.0,
            gamma_discount: 0.99,
            beta_m: 2.0,
            horizon: 0,
            cost_scale: 0.1,
            low_streak_limit: 5,
            rate_jitter: 0.1,
            rol_form: RolForm::Surrogate,
        }
    }
}

impl EnvConfig {
    pub fn cap(&self) -> usize {
        if self.group_cap == 0 {
            self.n_vehicles.div_ceil(2)
        } else {
            self.group_cap
        }
    }

    pub fn max_steps(&self) -> usize {
        if self.horizon == 0 {
            self.n_vehicles
        } else {
            self.horizon
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_vehicles == 0 {
            invalid!("environment needs at least one vehicle");
        }
        if !(0.0..=1.0).contains(&self.high_rep_threshold) {
            invalid!("high_rep_threshold must lie in [0, 1]");
        }
        if !(self.r0 > 0.0) {
            invalid!("r0 must be positive");
        }
        if !(self.gamma_discount > 0.0 && self.gamma_discount <= 1.0) {
            invalid!("discount must lie in (0, 1]");
        }
        if self.low_streak_limit == 0 {
            invalid!("low_streak_limit must be at least 1");
        }
        Ok(())
    }
}

/// Snapshot of the fleet the selector chooses from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectWorld {
    pub reps: Vec<f64>,
    pub nodes: Vec<NodeResources>,
    pub positions: Vec<Xy>,
}

impl SelectWorld {
    pub fn len(&self) -> usize {
        self.reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.is_empty()
    }

    /// Synthetic fleet: 60% of vehicles draw reputations in [0.55, 0.95],
    /// the rest in [0.05, 0.45]. Vehicles spread along a 200 m stretch of
    /// road except two stragglers 600 m or more down the road, which the
    /// default `r0` excludes.
    pub fn synthetic(n: usize, seed: u64) -> Self {
        let mut r = rng::substream(seed, "select-world", &[]);
        let n_high = (n as f64 * 0.6).round() as usize;
        let mut reps: Vec<f64> = (0..n)
            .map(|i| {
                if i < n_high {
                    r.random_range(0.55..0.95)
                } else {
                    r.random_range(0.05..0.45)
                }
            })
            .collect();
        // Shuffle so reputation is not tied to the index.
        for i in (1..n).rev() {
            let j = r.random_range(0..=i);
            reps.swap(i, j);
        }
        let nodes = (0..n)
            .map(|_| NodeResources {
                data_size: r.random_range(100.0..400.0),
                xi: r.random_range(100.0..1000.0),
                tau_rate: r.random_range(100.0..400.0),
                model_size: 200.0,
            })
            .collect();
        let mut positions: Vec<Xy> = (0..n)
            .map(|_| [r.random_range(0.0..200.0), r.random_range(0.0..11.1)])
            .collect();
        if n > 4 {
            for p in positions.iter_mut().take(2) {
                p[0] = r.random_range(600.0..700.0);
            }
        }
        Self { reps, nodes, positions }
    }

    pub fn centroid(&self) -> Xy {
        median_point(&self.positions)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectState {
    pub tau_rates: Vec<f64>,
    pub xi: Vec<f64>,
    pub rep: Vec<f64>,
    pub data_sizes: Vec<f64>,
    pub model_size: f64,
    /// Selection mask accumulated so far.
    pub lambda_prev: Vec<u8>,
    /// Inside the `r0` radius.
    pub feasible: Vec<bool>,
    pub consec_low: u32,
    pub high_picks: usize,
    pub steps: usize,
    pub centroid: Xy,
}

impl SelectState {
    pub fn n(&self) -> usize {
        self.rep.len()
    }

    pub fn valid_actions(&self) -> Vec<bool> {
        self.feasible
            .iter()
            .zip(&self.lambda_prev)
            .map(|(f, s)| *f && *s == 0)
            .collect()
    }

    pub fn selected(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.lambda_prev[i] == 1).collect()
    }

    pub fn node(&self, i: usize) -> NodeResources {
        NodeResources {
            data_size: self.data_sizes[i],
            xi: self.xi[i],
            tau_rate: self.tau_rates[i],
            model_size: self.model_size,
        }
    }

    /// Network input: five features per vehicle, then streak and progress.
    pub fn observation(&self, cfg: &EnvConfig) -> Vec<f64> {
        let max_tau = self.tau_rates.iter().copied().fold(0.0, f64::max).max(1e-12);
        let max_xi = self.xi.iter().copied().fold(0.0, f64::max).max(1e-12);
        let mut obs = Vec::with_capacity(5 * self.n() + 2);
        for i in 0..self.n() {
            obs.push(self.tau_rates[i] / max_tau);
            obs.push(self.xi[i] / max_xi);
            obs.push(self.rep[i]);
            obs.push(self.lambda_prev[i] as f64);
            obs.push(if self.feasible[i] { 1.0 } else { 0.0 });
        }
        obs.push(self.consec_low as f64 / cfg.low_streak_limit as f64);
        obs.push(self.high_picks as f64 / cfg.cap() as f64);
        obs
    }
}

pub fn observation_size(n: usize) -> usize {
    5 * n + 2
}

/// Coordinate-wise median, so a few distant vehicles do not drag the
/// feasibility disc away from the fleet.
fn median_point(points: &[Xy]) -> Xy {
    let median = |k: usize| {
        let mut v: Vec<f64> = points.iter().map(|p| p[k]).collect();
        v.sort_by(f64::total_cmp);
        match v.len() {
            0 => 0.0,
            n if n % 2 == 1 => v[n / 2],
            n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
        }
    };
    [median(0), median(1)]
}

pub fn env_reset(cfg: &EnvConfig, world: &SelectWorld, seed: u64) -> Result<SelectState> {
    cfg.validate()?;
    if world.len() < cfg.n_vehicles {
        invalid!("world has {} vehicles, environment needs {}", world.len(), cfg.n_vehicles);
    }
    let n = cfg.n_vehicles;
    let mut r = rng::substream(seed, "env-reset", &[]);
    let mut jitter = |v: f64| {
        if cfg.rate_jitter > 0.0 {
            v * (1.0 + r.random_range(-cfg.rate_jitter..=cfg.rate_jitter))
        } else {
            v
        }
    };
    let centroid = median_point(&world.positions[..n]);
    let feasible = world.positions[..n]
        .iter()
        .map(|p| (p[0] - centroid[0]).hypot(p[1] - centroid[1]) <= cfg.r0)
        .collect();
    Ok(SelectState {
        tau_rates: world.nodes[..n].iter().map(|nd| jitter(nd.tau_rate)).collect(),
        xi: world.nodes[..n].iter().map(|nd| jitter(nd.xi)).collect(),
        rep: world.reps[..n].to_vec(),
        data_sizes: world.nodes[..n].iter().map(|nd| nd.data_size).collect(),
        model_size: world.nodes.first().map_or(0.0, |nd| nd.model_size),
        lambda_prev: vec![0; n],
        feasible,
        consec_low: 0,
        high_picks: 0,
        steps: 0,
        centroid,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: SelectState,
    pub reward: f64,
    pub done: bool,
    /// Reward split for diagnostics.
    pub cost_term: f64,
    pub shaping: f64,
}

/// Per-vehicle cost `(1 - rep) + C_a + C_u` used by the step reward.
pub fn pick_cost(cfg: &EnvConfig, state: &SelectState, i: usize) -> Result<f64> {
    let (ca, cu) = time_cost(&state.node(i), cfg.beta_m)?;
    Ok(rol_cost(&[i], &state.rep, cfg.rol_form)? + ca + cu)
}

pub fn env_step(cfg: &EnvConfig, state: &SelectState, action: usize) -> Result<StepOutcome> {
    if action >= state.n() {
        return Err(Error::InvalidAction { action, reason: "index out of range" });
    }
    if state.lambda_prev[action] == 1 {
        return Err(Error::InvalidAction { action, reason: "vehicle already selected" });
    }
    if !state.feasible[action] {
        return Err(Error::InvalidAction { action, reason: "vehicle outside the r0 radius" });
    }
    let mut next = state.clone();
    next.lambda_prev[action] = 1;
    next.steps += 1;
    let k = next.lambda_prev.iter().filter(|&&s| s == 1).count() as f64;
    let cost_term = -cfg.cost_scale * pick_cost(cfg, state, action)? / k;

    let mut done = false;
    let shaping = if state.rep[action] >= cfg.high_rep_threshold {
        next.consec_low = 0;
        next.high_picks += 1;
        if next.high_picks >= cfg.cap() {
            done = true;
            HIGH_PICK_BONUS + GROUP_FULL_BONUS
        } else {
            HIGH_PICK_BONUS
        }
    } else {
        next.consec_low += 1;
        if next.consec_low >= cfg.low_streak_limit {
            done = true;
            LOW_STREAK_PENALTY
        } else {
            LOW_PICK_PENALTY
        }
    };
    if next.steps >= cfg.max_steps() || !next.valid_actions().iter().any(|v| *v) {
        done = true;
    }
    Ok(StepOutcome {
        state: next,
        reward: cost_term + shaping,
        done,
        cost_term,
        shaping,
    })
}

/// Highest-reputation feasible vehicle, ties by index.
pub fn greedy_action(state: &SelectState) -> Option<usize> {
    state
        .valid_actions()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v)
        .map(|(i, _)| i)
        .max_by(|&a, &b| state.rep[a].total_cmp(&state.rep[b]).then(b.cmp(&a)))
}

/// Run one episode with `choose` picking actions; returns (picks, total reward).
pub fn rollout(
    cfg: &EnvConfig,
    world: &SelectWorld,
    seed: u64,
    mut choose: impl FnMut(&SelectState) -> Option<usize>,
) -> Result<(Vec<usize>, f64)> {
    let mut state = env_reset(cfg, world, seed)?;
    let mut picks = Vec::new();
    let mut total = 0.0;
    if !state.valid_actions().iter().any(|v| *v) {
        return Ok((picks, total));
    }
    while let Some(a) = choose(&state) {
        let out = env_step(cfg, &state, a)?;
        picks.push(a);
        total += out.reward;
        state = out.state;
        if out.done {
            break;
        }
    }
    Ok((picks, total))
}

/// Mean episode reward of the greedy max-reputation policy.
pub fn greedy_oracle_reward(cfg: &EnvConfig, world: &SelectWorld, seeds: impl IntoIterator<Item = u64>) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    for s in seeds {
        sum += rollout(cfg, world, s, greedy_action)?.1;
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Mean episode reward of a uniformly random feasible policy.
pub fn random_policy_reward(cfg: &EnvConfig, world: &SelectWorld, episodes: usize, seed: u64) -> Result<f64> {
    let mut sum = 0.0;
    for e in 0..episodes {
        let mut r = rng::substream(seed, "random-policy", &[e as u64]);
        sum += rollout(cfg, world, rng::derive_seed(seed, "episode", &[e as u64]), |s| {
            let valid: Vec<usize> = (0..s.n()).filter(|&i| s.valid_actions()[i]).collect();
            if valid.is_empty() {
                None
            } else {
                Some(valid[r.random_range(0..valid.len())])
            }
        })?
        .1;
    }
    Ok(if episodes == 0 { 0.0 } else { sum / episodes as f64 })
}
