//! Reputation-aware vehicle selection as a sequential decision problem,
//! trained with PPO and compared against a DQN baseline.

pub mod costs;
pub mod dqn;
pub mod env;
pub mod nn;
pub mod ppo;

pub use costs::{rol_cost, time_cost, total_cost, NodeResources, RolForm};
pub use dqn::{dqn_train, DqnHyper};
pub use env::{
    env_reset, env_step, greedy_action, greedy_oracle_reward, random_policy_reward, rollout, EnvConfig, SelectState,
    SelectWorld, StepOutcome,
};
pub use nn::{Adam, Mlp, PolicyParams, ValueParams};
pub use ppo::{
    clipped_objective, gae_advantages, gae_raw, policy_group, ppo_train, ppo_update, rewards_to_go, EpisodeLog,
    PpoHyper, TrainResult, Transition,
};

/// First episode at which the trailing `window`-episode mean reward
/// reaches `target`.
pub fn episodes_to_reach(curve: &[EpisodeLog], target: f64, window: usize) -> Option<usize> {
    let window = window.max(1);
    let mut sum = 0.0;
    for (i, log) in curve.iter().enumerate() {
        sum += log.reward;
        if i >= window {
            sum -= curve[i - window].reward;
        }
        if i + 1 >= window && sum / window as f64 >= target {
            return Some(i + 1);
        }
    }
    None
}

/// Mean reward over the last `n` episodes.
pub fn tail_mean(curve: &[EpisodeLog], n: usize) -> f64 {
    let tail = &curve[curve.len().saturating_sub(n)..];
    if tail.is_empty() {
        0.0
    } else {
        tail.iter().map(|l| l.reward).sum::<f64>() / tail.len() as f64
    }
}

/// Learning curve as CSV: `episode,reward,policy_loss,value_loss`.
pub fn curve_to_csv(curve: &[EpisodeLog]) -> String {
    let mut out = String::from("episode,reward,policy_loss,value_loss\n");
    for l in curve {
        out.push_str(&format!("{},{:?},{:?},{:?}\n", l.episode, l.reward, l.policy_loss, l.value_loss));
    }
    out
}
