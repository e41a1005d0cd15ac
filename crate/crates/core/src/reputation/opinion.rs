//! Opinion algebra: local opinions from interaction counts, recommendation
//! averaging, consensus fusion and expected-belief reputation.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Tolerance on the `r + d + u = 1` invariant.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A (trust, distrust, uncertainty) triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Opinion {
    pub r: f64,
    pub d: f64,
    pub u: f64,
}

impl Opinion {
    pub fn new(r: f64, d: f64, u: f64) -> Result<Self> {
        let op = Self { r, d, u };
        op.validate()?;
        Ok(op)
    }

    /// Total ignorance: `(0, 0, 1)`.
    pub const fn vacuous() -> Self {
        Self { r: 0.0, d: 0.0, u: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let Self { r, d, u } = *self;
        if !(r.is_finite() && d.is_finite() && u.is_finite()) {
            invalid!("opinion has non-finite component: ({r}, {d}, {u})");
        }
        if r < 0.0 || d < 0.0 || u < 0.0 || r > 1.0 || d > 1.0 || u > 1.0 {
            invalid!("opinion component outside [0, 1]: ({r}, {d}, {u})");
        }
        if (r + d + u - 1.0).abs() > SUM_TOLERANCE {
            invalid!("opinion does not sum to one: ({r}, {d}, {u})");
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }
}

/// The γ of the expected-belief formula: how much uncertainty counts
/// towards reputation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyWeight(f64);

impl UncertaintyWeight {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            invalid!("uncertainty weight must lie in [0, 1], got {gamma}");
        }
        Ok(Self(gamma))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for UncertaintyWeight {
    fn default() -> Self {
        Self(0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionStats {
    /// Positive events.
    pub alpha: u64,
    /// Negative events.
    pub beta: u64,
    /// Packet-success probability.
    pub s: f64,
}

impl InteractionStats {
    pub fn new(s: f64) -> Self {
        Self { alpha: 0, beta: 0, s }
    }

    pub fn events(&self) -> u64 {
        self.alpha + self.beta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub delta: f64,
    pub opinion: Opinion,
}

pub fn local_opinion(stats: &InteractionStats) -> Result<Opinion> {
    let n = stats.events();
    if n == 0 {
        invalid!("local opinion needs at least one interaction");
    }
    if !(0.0..=1.0).contains(&stats.s) {
        invalid!("packet-success probability must lie in [0, 1], got {}", stats.s);
    }
    let u = 1.0 - stats.s;
    let belief_mass = 1.0 - u;
    Ok(Opinion {
        r: belief_mass * stats.alpha as f64 / n as f64,
        d: belief_mass * stats.beta as f64 / n as f64,
        u,
    })
}

pub fn reputation(op: &Opinion, gamma: f64) -> Result<f64> {
    op.validate()?;
    let gamma = UncertaintyWeight::new(gamma)?.get();
    Ok(op.r + gamma * op.u)
}

/// Same formula as [`reputation`], applied to a fused opinion.
pub fn final_reputation(op: &Opinion, gamma: f64) -> Result<f64> {
    reputation(op, gamma)
}

/// δ-weighted component-wise average of recommenders' opinions.
pub fn combine_recommendations(recs: &[Recommendation]) -> Result<Opinion> {
    if recs.is_empty() {
        invalid!("need at least one recommendation");
    }
    if let Some(bad) = recs.iter().find(|rec| !(rec.delta >= 0.0)) {
        invalid!("recommendation weight must be non-negative, got {}", bad.delta);
    }
    let total: f64 = recs.iter().map(|rec| rec.delta).sum();
    if total <= 0.0 {
        invalid!("recommendation weights sum to zero");
    }
    let (mut r, mut d, mut u) = (0.0, 0.0, 0.0);
    for rec in recs {
        rec.opinion.validate()?;
        let w = rec.delta / total;
        r += w * rec.opinion.r;
        d += w * rec.opinion.d;
        u += w * rec.opinion.u;
    }
    Ok(Opinion { r, d, u })
}

/// Consensus fusion of a local opinion with a combined recommendation.
///
/// Fails with [`Error::DegenerateFusion`] when both opinions carry zero
/// uncertainty, where the shared denominator vanishes.
pub fn fuse_final(local: &Opinion, rec: &Opinion) -> Result<Opinion> {
    local.validate()?;
    rec.validate()?;
    let k = local.u + rec.u - local.u * rec.u;
    if k <= 0.0 {
        return Err(Error::DegenerateFusion);
    }
    let r = (local.r * rec.u + rec.r * local.u) / k;
    let d = (local.d * rec.u + rec.d * local.u) / k;
    let u = (local.u * rec.u) / k;
    Ok(Opinion { r, d, u })
}

/// [`fuse_final`], falling back to an equal-weight average when both
/// opinions are certain.
pub fn fuse_or_average(local: &Opinion, rec: &Opinion) -> Result<Opinion> {
    match fuse_final(local, rec) {
        Err(Error::DegenerateFusion) => combine_recommendations(&[
            Recommendation { delta: 1.0, opinion: *local },
            Recommendation { delta: 1.0, opinion: *rec },
        ]),
        other => other,
    }
}

/// Record one data-sharing interaction.
///
/// An event is positive when the share was delivered and the shared data is
/// similar enough; otherwise it is negative. `s` tracks the delivery rate,
/// with the previous value counted as one pseudo-observation.
pub fn count_interaction(
    prev: &InteractionStats,
    sim_value: f64,
    sim_threshold: f64,
    delivered: bool,
) -> InteractionStats {
    let mut next = *prev;
    if delivered && sim_value >= sim_threshold {
        next.alpha += 1;
    } else {
        next.beta += 1;
    }
    let n = prev.events() as f64;
    let hit = if delivered { 1.0 } else { 0.0 };
    next.s = (prev.s * (n + 1.0) + hit) / (n + 2.0);
    next
}
