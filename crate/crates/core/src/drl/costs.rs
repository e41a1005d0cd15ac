//! Per-slot federated-learning costs: reputation-of-learning, local
//! computation time and upload time.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// How the reputation-of-learning term is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolForm {
    /// `Σ (1 - rep_i)`.
    #[default]
    Surrogate,
    /// `Σ |1 - 1/rep_i|`: absolute loss against the "trusted" label `1`
    /// with prediction `1/R`. Reputations are floored at 1e-3.
    Literal,
}

/// Resources of one vehicle as seen by the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeResources {
    /// Training samples held by the vehicle.
    pub data_size: f64,
    /// Compute rate in cycles per second.
    pub xi: f64,
    /// Uplink rate in parameter units per second.
    pub tau_rate: f64,
    /// Size of the shared model in parameter units.
    pub model_size: f64,
}

pub fn rol_cost(selected: &[usize], reps: &[f64], form: RolForm) -> Result<f64> {
    let mut total = 0.0;
    for &i in selected {
        let Some(&rep) = reps.get(i) else {
            invalid!("selected vehicle {i} out of range");
        };
        if !(0.0..=1.0).contains(&rep) {
            invalid!("reputation must lie in [0, 1], got {rep}");
        }
        total += match form {
            RolForm::Surrogate => 1.0 - rep,
            RolForm::Literal => (1.0 - 1.0 / rep.max(1e-3)).abs(),
        };
    }
    Ok(total)
}

/// `(C_a, C_u)`: local training time and upload time in seconds.
pub fn time_cost(node: &NodeResources, beta_m: f64) -> Result<(f64, f64)> {
    if !(node.xi > 0.0) || !(node.tau_rate > 0.0) {
        invalid!("compute and uplink rates must be positive");
    }
    Ok((node.data_size * beta_m / node.xi, node.model_size / node.tau_rate))
}

/// Reputation cost plus the mean per-vehicle time cost of a selection.
pub fn total_cost(selected: &[usize], nodes: &[NodeResources], reps: &[f64], beta_m: f64, form: RolForm) -> Result<f64> {
    if selected.is_empty() {
        invalid!("total cost of an empty selection is undefined");
    }
    let mut time = 0.0;
    for &i in selected {
        let Some(node) = nodes.get(i) else {
            invalid!("selected vehicle {i} out of range");
        };
        let (ca, cu) = time_cost(node, beta_m)?;
        time += ca + cu;
    }
    Ok(rol_cost(selected, reps, form)? + time / selected.len() as f64)
}
