//! Clipped-surrogate PPO with a masked categorical policy and a learned
//! state-value baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::env::{env_reset, env_step, observation_size, EnvConfig, SelectState, SelectWorld};
use super::nn::{clip_grad_norm, masked_softmax, Adam, Mlp, PolicyParams, ValueParams};
use crate::error::{invalid, Error, Result};
use crate::rng::{self, SimRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Valid-action mask at `state`.
    pub valid: Vec<bool>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub next_valid: Vec<bool>,
    pub done: bool,
    pub log_prob: f64,
    pub value_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoHyper {
    pub episodes: usize,
    pub batch_episodes: usize,
    pub epochs_per_batch: usize,
    pub minibatch: usize,
    pub clip_eps: f64,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub lambda_gae: f64,
    pub hidden: Vec<usize>,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            episodes: 500,
            batch_episodes: 10,
            epochs_per_batch: 8,
            minibatch: 32,
            clip_eps: 0.2,
            lr_policy: 1e-3,
            lr_value: 1e-3,
            lambda_gae: 0.95,
            hidden: vec![64, 64],
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoHyper {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.batch_episodes == 0 || self.epochs_per_batch == 0 || self.minibatch == 0 {
            invalid!("episode, batch, epoch and minibatch counts must be positive");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            invalid!("clip_eps must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.lambda_gae) {
            invalid!("lambda_gae must lie in [0, 1]");
        }
        if self.hidden.contains(&0) {
            invalid!("hidden layers must be non-empty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub policy: PolicyParams,
    pub value: Option<ValueParams>,
    pub curve: Vec<EpisodeLog>,
}

/// Discounted returns, restarting after every terminal transition.
pub fn rewards_to_go(transitions: &[Transition], gamma_discount: f64) -> Vec<f64> {
    let mut out = vec![0.0; transitions.len()];
    let mut acc = 0.0;
    for (i, t) in transitions.iter().enumerate().rev() {
        if t.done {
            acc = 0.0;
        }
        acc = t.reward + gamma_discount * acc;
        out[i] = acc;
    }
    out
}

/// Generalized advantage estimates before normalization.
pub fn gae_raw(transitions: &[Transition], gamma_discount: f64, lambda_gae: f64) -> Vec<f64> {
    let mut out = vec![0.0; transitions.len()];
    let mut acc = 0.0;
    for i in (0..transitions.len()).rev() {
        let t = &transitions[i];
        let next_value = if t.done {
            0.0
        } else {
            transitions.get(i + 1).map_or(0.0, |n| n.value_estimate)
        };
        if t.done {
            acc = 0.0;
        }
        let delta = t.reward + gamma_discount * next_value - t.value_estimate;
        acc = delta + gamma_discount * lambda_gae * acc;
        out[i] = acc;
    }
    out
}

/// GAE normalized to zero mean and unit variance over the batch.
pub fn gae_advantages(transitions: &[Transition], gamma_discount: f64, lambda_gae: f64) -> Vec<f64> {
    let mut adv = gae_raw(transitions, gamma_discount, lambda_gae);
    let n = adv.len() as f64;
    if adv.len() > 1 {
        let mean = adv.iter().sum::<f64>() / n;
        let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-8);
        adv.iter_mut().for_each(|a| *a = (*a - mean) / sd);
    }
    adv
}

/// `min(ratio·A, clip(ratio, 1-ε, 1+ε)·A)`.
pub fn clipped_objective(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage)
}

/// Log-probability of `action` under a masked softmax over `logits`.
pub fn log_prob(logits: &[f64], valid: &[bool], action: usize) -> f64 {
    let max = logits
        .iter()
        .zip(valid)
        .filter(|(_, v)| **v)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .zip(valid)
            .filter(|(_, v)| **v)
            .map(|(l, _)| (l - max).exp())
            .sum::<f64>()
            .ln();
    logits[action] - lse
}

pub fn new_networks(n_vehicles: usize, hidden: &[usize], rng: &mut SimRng) -> Result<(PolicyParams, ValueParams)> {
    let mut sizes = vec![observation_size(n_vehicles)];
    sizes.extend_from_slice(hidden);
    let mut policy_sizes = sizes.clone();
    policy_sizes.push(n_vehicles);
    sizes.push(1);
    Ok((Mlp::new(&policy_sizes, 0.01, rng)?, Mlp::new(&sizes, 1.0, rng)?))
}

/// Several epochs of minibatch Adam on the clipped surrogate (plus entropy
/// bonus) and on the value MSE.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    policy: &PolicyParams,
    value: &ValueParams,
    batch: &[Transition],
    returns: &[f64],
    advantages: &[f64],
    hyper: &PpoHyper,
    opt: &mut (Adam, Adam),
    rng: &mut SimRng,
) -> Result<(PolicyParams, ValueParams, UpdateStats)> {
    if batch.is_empty() {
        invalid!("PPO update needs a non-empty batch");
    }
    if returns.len() != batch.len() || advantages.len() != batch.len() {
        invalid!("returns and advantages must match the batch length");
    }
    let mut policy = policy.clone();
    let mut value = value.clone();
    let mut stats = UpdateStats::default();
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut samples = 0usize;
    for _ in 0..hyper.epochs_per_batch {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(hyper.minibatch) {
            let mut gp = vec![0.0; policy.params.len()];
            let mut gv = vec![0.0; value.params.len()];
            let m = chunk.len() as f64;
            for &k in chunk {
                let t = &batch[k];
                let cache = policy.forward(&t.state);
                let logits = cache.output();
                let p = masked_softmax(logits, &t.valid);
                let lp = log_prob(logits, &t.valid, t.action);
                let ratio = (lp - t.log_prob).exp();
                let a = advantages[k];
                let obj = clipped_objective(ratio, a, hyper.clip_eps);
                let clipped = (a > 0.0 && ratio > 1.0 + hyper.clip_eps) || (a < 0.0 && ratio < 1.0 - hyper.clip_eps);
                let entropy: f64 = p.iter().filter(|x| **x > 0.0).map(|x| -x * x.ln()).sum();
                // Gradient of the loss -(obj + c·H) with respect to the logits.
                let d_lp = if clipped { 0.0 } else { ratio * a };
                let mut d_logits = vec![0.0; logits.len()];
                for j in 0..logits.len() {
                    if !t.valid[j] {
                        continue;
                    }
                    let ind = if j == t.action { 1.0 } else { 0.0 };
                    let d_obj = d_lp * (ind - p[j]);
                    let d_ent = if p[j] > 0.0 { -p[j] * (p[j].ln() + entropy) } else { 0.0 };
                    d_logits[j] = -(d_obj + hyper.entropy_coef * d_ent) / m;
                }
                policy.backward(&cache, &d_logits, &mut gp);

                let vcache = value.forward(&t.state);
                let v = vcache.output()[0];
                let err = v - returns[k];
                value.backward(&vcache, &[2.0 * err / m], &mut gv);

                if !(obj.is_finite() && err.is_finite()) {
                    return Err(Error::Divergence {
                        epoch: samples,
                        loss: if obj.is_finite() { err } else { obj },
                    });
                }
                stats.policy_loss -= obj;
                stats.value_loss += err * err;
                stats.entropy += entropy;
                stats.clip_fraction += if clipped { 1.0 } else { 0.0 };
                samples += 1;
            }
            clip_grad_norm(&mut gp, hyper.max_grad_norm);
            clip_grad_norm(&mut gv, hyper.max_grad_norm * 10.0);
            opt.0.step(&mut policy.params, &gp);
            opt.1.step(&mut value.params, &gv);
        }
    }
    let n = samples.max(1) as f64;
    stats.policy_loss /= n;
    stats.value_loss /= n;
    stats.entropy /= n;
    stats.clip_fraction /= n;
    if !(policy.is_finite() && value.is_finite()) {
        return Err(Error::Divergence {
            epoch: samples,
            loss: stats.policy_loss,
        });
    }
    Ok((policy, value, stats))
}

fn sample_categorical(p: &[f64], rng: &mut SimRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            acc += pi;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn any_valid(state: &SelectState) -> bool {
    state.valid_actions().iter().any(|v| *v)
}

/// Seed of the environment reset for episode `e` of a training run.
pub fn episode_seed(seed: u64, e: usize) -> u64 {
    rng::derive_seed(seed, "episode", &[e as u64])
}

pub fn ppo_train(cfg: &EnvConfig, world: &SelectWorld, hyper: &PpoHyper, seed: u64) -> Result<TrainResult> {
    cfg.validate()?;
    hyper.validate()?;
    let mut init = rng::substream(seed, "ppo-init", &[]);
    let (mut policy, mut value) = new_networks(cfg.n_vehicles, &hyper.hidden, &mut init)?;
    let mut opt = (
        Adam::new(policy.params.len(), hyper.lr_policy),
        Adam::new(value.params.len(), hyper.lr_value),
    );
    let mut act_rng = rng::substream(seed, "ppo-act", &[]);
    let mut upd_rng = rng::substream(seed, "ppo-update", &[]);
    let mut curve = Vec::with_capacity(hyper.episodes);
    let mut batch = Vec::new();
    let mut pending = Vec::new();
    for e in 0..hyper.episodes {
        let mut state = env_reset(cfg, world, episode_seed(seed, e))?;
        let mut total = 0.0;
        let mut obs = state.observation(cfg);
        while any_valid(&state) {
            let valid = state.valid_actions();
            let logits = policy.predict(&obs);
            let v_est = value.predict(&obs)[0];
            let p = masked_softmax(&logits, &valid);
            let action = sample_categorical(&p, &mut act_rng);
            let out = env_step(cfg, &state, action)?;
            let next_obs = out.state.observation(cfg);
            batch.push(Transition {
                state: obs,
                valid,
                action,
                reward: out.reward,
                next_state: next_obs.clone(),
                next_valid: out.state.valid_actions(),
                done: out.done,
                log_prob: p[action].ln(),
                value_estimate: v_est,
            });
            total += out.reward;
            obs = next_obs;
            state = out.state;
            if out.done {
                break;
            }
        }
        pending.push(e);
        curve.push(EpisodeLog {
            episode: e,
            reward: total,
            policy_loss: f64::NAN,
            value_loss: f64::NAN,
        });
        if pending.len() == hyper.batch_episodes || e + 1 == hyper.episodes {
            if !batch.is_empty() {
                let returns = rewards_to_go(&batch, cfg.gamma_discount);
                let adv = gae_advantages(&batch, cfg.gamma_discount, hyper.lambda_gae);
                let (p, v, stats) = ppo_update(&policy, &value, &batch, &returns, &adv, hyper, &mut opt, &mut upd_rng)?;
                policy = p;
                value = v;
                for &ep in &pending {
                    curve[ep].policy_loss = stats.policy_loss;
                    curve[ep].value_loss = stats.value_loss;
                }
            }
            batch.clear();
            pending.clear();
        }
    }
    Ok(TrainResult {
        policy,
        value: Some(value),
        curve,
    })
}

/// Greedy rollout of a trained policy: the vehicles it selects form the
/// high-reputation group, everyone else the low group.
pub fn policy_group(policy: &PolicyParams, cfg: &EnvConfig, world: &SelectWorld) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut state = env_reset(cfg, world, 0)?;
    let mut high = Vec::new();
    while any_valid(&state) {
        let valid = state.valid_actions();
        let logits = policy.predict(&state.observation(cfg));
        let action = (0..valid.len())
            .filter(|&i| valid[i])
            .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
            .expect("a valid action exists");
        let out = env_step(cfg, &state, action)?;
        high.push(action);
        state = out.state;
        if out.done {
            break;
        }
    }
    let low = (0..cfg.n_vehicles).filter(|i| !high.contains(i)).collect();
    high.sort_unstable();
    Ok((high, low))
}
