//! Deep Q-network baseline: ε-greedy exploration, uniform replay and a
//! periodically synced target network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::env::{env_reset, env_step, observation_size, EnvConfig, SelectWorld};
use super::nn::{clip_grad_norm, Adam, Mlp};
use super::ppo::{episode_seed, EpisodeLog, Transition, TrainResult};
use crate::error::{invalid, Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnHyper {
    pub episodes: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub target_sync_steps: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of the episodes over which ε decays linearly.
    pub eps_decay_fraction: f64,
    pub huber_delta: f64,
    pub max_grad_norm: f64,
}

impl Default for DqnHyper {
    fn default() -> Self {
        Self {
            episodes: 500,
            hidden: vec![64, 64],
            lr: 1e-3,
            replay_capacity: 10_000,
            batch_size: 32,
            warmup_steps: 200,
            target_sync_steps: 250,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_fraction: 0.6,
            huber_delta: 1.0,
            max_grad_norm: 10.0,
        }
    }
}

impl DqnHyper {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.batch_size == 0 || self.replay_capacity < self.batch_size {
            invalid!("episodes and batch size must be positive and fit in the replay buffer");
        }
        if !(0.0..=1.0).contains(&self.eps_end) || !(self.eps_end..=1.0).contains(&self.eps_start) {
            invalid!("exploration schedule must satisfy 0 ≤ eps_end ≤ eps_start ≤ 1");
        }
        if self.hidden.contains(&0) || self.target_sync_steps == 0 {
            invalid!("hidden layers and target sync interval must be positive");
        }
        Ok(())
    }

    /// Exploration rate at the start of `episode`.
    pub fn epsilon(&self, episode: usize) -> f64 {
        let span = (self.eps_decay_fraction * self.episodes as f64).max(1.0);
        let frac = (episode as f64 / span).min(1.0);
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

fn greedy(q: &[f64], valid: &[bool]) -> Option<usize> {
    (0..q.len())
        .filter(|&i| valid[i])
        .max_by(|&a, &b| q[a].total_cmp(&q[b]).then(b.cmp(&a)))
}

pub fn dqn_train(cfg: &EnvConfig, world: &SelectWorld, hyper: &DqnHyper, seed: u64) -> Result<TrainResult> {
    cfg.validate()?;
    hyper.validate()?;
    let mut sizes = vec![observation_size(cfg.n_vehicles)];
    sizes.extend_from_slice(&hyper.hidden);
    sizes.push(cfg.n_vehicles);
    let mut q = Mlp::new(&sizes, 1.0, &mut rng::substream(seed, "dqn-init", &[]))?;
    let mut target = q.clone();
    let mut opt = Adam::new(q.params.len(), hyper.lr);
    let mut act_rng = rng::substream(seed, "dqn-act", &[]);
    let mut replay_rng = rng::substream(seed, "dqn-replay", &[]);
    let mut replay: Vec<Transition> = Vec::with_capacity(hyper.replay_capacity);
    let mut cursor = 0;
    let mut steps = 0usize;
    let mut curve = Vec::with_capacity(hyper.episodes);
    for e in 0..hyper.episodes {
        let eps = hyper.epsilon(e);
        let mut state = env_reset(cfg, world, episode_seed(seed, e))?;
        let mut total = 0.0;
        let mut last_loss = f64::NAN;
        loop {
            let valid = state.valid_actions();
            let obs = state.observation(cfg);
            let action = if act_rng.random::<f64>() < eps {
                let choices: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
                if choices.is_empty() {
                    break;
                }
                choices[act_rng.random_range(0..choices.len())]
            } else {
                match greedy(&q.predict(&obs), &valid) {
                    Some(a) => a,
                    None => break,
                }
            };
            let out = env_step(cfg, &state, action)?;
            total += out.reward;
            let t = Transition {
                state: obs,
                valid,
                action,
                reward: out.reward,
                next_state: out.state.observation(cfg),
                next_valid: out.state.valid_actions(),
                done: out.done,
                log_prob: 0.0,
                value_estimate: 0.0,
            };
            if replay.len() < hyper.replay_capacity {
                replay.push(t);
            } else {
                replay[cursor] = t;
            }
            cursor = (cursor + 1) % hyper.replay_capacity;
            steps += 1;

            if steps >= hyper.warmup_steps && replay.len() >= hyper.batch_size {
                let mut grad = vec![0.0; q.params.len()];
                let mut loss = 0.0;
                let m = hyper.batch_size as f64;
                for _ in 0..hyper.batch_size {
                    let s = &replay[replay_rng.random_range(0..replay.len())];
                    let bootstrap = if s.done {
                        0.0
                    } else {
                        let tq = target.predict(&s.next_state);
                        greedy(&tq, &s.next_valid).map_or(0.0, |a| tq[a])
                    };
                    let y = s.reward + cfg.gamma_discount * bootstrap;
                    let cache = q.forward(&s.state);
                    let err = cache.output()[s.action] - y;
                    let d = hyper.huber_delta;
                    let (l, g) = if err.abs() <= d {
                        (0.5 * err * err, err)
                    } else {
                        (d * (err.abs() - 0.5 * d), d * err.signum())
                    };
                    loss += l / m;
                    let mut d_out = vec![0.0; cfg.n_vehicles];
                    d_out[s.action] = g / m;
                    q.backward(&cache, &d_out, &mut grad);
                }
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch: e, loss });
                }
                clip_grad_norm(&mut grad, hyper.max_grad_norm);
                opt.step(&mut q.params, &grad);
                last_loss = loss;
            }
            if steps % hyper.target_sync_steps == 0 {
                target = q.clone();
            }
            state = out.state;
            if out.done {
                break;
            }
        }
        curve.push(EpisodeLog {
            episode: e,
            reward: total,
            policy_loss: last_loss,
            value_loss: f64::NAN,
        });
    }
    Ok(TrainResult {
        policy: q,
        value: None,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_schedule_reaches_floor() {
        let h = DqnHyper::default();
        assert_eq!(h.epsilon(0), 1.0);
        assert!((h.epsilon(300) - 0.05).abs() < 1e-12);
        assert!((h.epsilon(499) - 0.05).abs() < 1e-12);
        assert!(h.epsilon(100) > h.epsilon(200));
    }
}
