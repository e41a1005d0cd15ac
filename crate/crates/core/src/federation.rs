//! Slot-by-slot federated training of the trajectory predictor.
//!
//! Every vehicle trains locally on its own shard, shares a (possibly
//! privatized) model, gossips its DAG and its opinions of the vehicles it
//! observed, and the shared models are merged into the global model. In the
//! asynchronous mode the merge is grouped by reputation: the selector's
//! high group is merged over several passes, the rest once at reduced
//! weight. A committee of the most reputable vehicles validates each
//! candidate before it replaces the global model.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::drl::{
    self, dqn_train, ppo_train, rol_cost, time_cost, DqnHyper, EnvConfig, NodeResources, PolicyParams, PpoHyper,
    RolForm, SelectWorld,
};
use crate::error::{invalid, Error, Result};
use crate::predictor::{batch_loss, forward, init_params, local_train, AdjacencyMode, Dims, ModelParams, SceneBatch};
use crate::privacy::{privatize, DpConfig};
use crate::reputation::{
    combine_recommendations, count_interaction, final_reputation, fuse_or_average, gossip_round, local_opinion,
    InteractionStats, LocalDag, Opinion, Recommendation, Topology, TxKind,
};
use crate::rng;
use crate::scene::{inject_bad_nodes, window, CorruptionMode, Metrics, MetricsAccumulator, Scene, Track, Xy};
use crate::similarity::{sim, SimWeights, TrajectorySegment};

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Reputation-grouped asynchronous aggregation.
    #[default]
    Afl,
    /// Barrier FedAvg over every participant.
    Sfl,
    /// Asynchronous, with the group roles swapped.
    LowRPriority,
    /// Asynchronous, sharing raw local models.
    NoDp,
    /// Asynchronous, with every vehicle in one group.
    NoDrl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlConfig {
    pub tau: usize,
    pub t_f: usize,
    pub stride: usize,
    /// Leading share of the scene's frames used for training; the rest is
    /// held out for evaluation.
    pub train_fraction: f64,
    /// A vehicle's shard keeps neighbours within this many meters.
    pub sensing_radius: f64,
    pub local_epochs: usize,
    pub lr: f64,
    pub init_scale: f64,
    pub mix0: f64,
    pub decay: f64,
    pub deep_rounds: usize,
    pub shallow_weight: f64,
    pub committee_size: usize,
    /// A candidate passes validation when its median committee loss is at
    /// most `(1 + por_tolerance)` times the incumbent's.
    pub por_tolerance: f64,
    /// The asynchronous slot closes at this quantile of vehicle job times.
    pub afl_deadline_quantile: f64,
    /// Global aggregation happens every this many slots.
    pub aggregate_every: usize,
    /// CPU cycles per training sample.
    pub beta_m: f64,
    /// Compute rates are drawn log-uniformly from this range.
    pub xi_range: (f64, f64),
    pub tau_rate_range: (f64, f64),
    pub s_comm_range: (f64, f64),
    /// Size of a shared model; defaults to the parameter count.
    pub model_size: Option<f64>,
    pub bad_fraction: f64,
    pub corruption: CorruptionMode,
    pub corruption_magnitude: f64,
    pub adjacency: AdjacencyMode,
    pub rol_form: RolForm,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            tau: 4,
            t_f: 6,
            stride: 2,
            train_fraction: 0.7,
            sensing_radius: 60.0,
            local_epochs: 20,
            lr: 3e-3,
            init_scale: 0.0,
            mix0: 0.5,
            decay: 0.5,
            deep_rounds: 3,
            shallow_weight: 0.25,
            committee_size: 5,
            por_tolerance: 0.0,
            afl_deadline_quantile: 0.5,
            aggregate_every: 1,
            beta_m: 1000.0,
            xi_range: (1e5, 1e6),
            tau_rate_range: (100.0, 400.0),
            s_comm_range: (0.9, 1.0),
            model_size: None,
            bad_fraction: 0.0,
            corruption: CorruptionMode::Jitter,
            corruption_magnitude: 1.5,
            adjacency: AdjacencyMode::default(),
            rol_form: RolForm::Surrogate,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        Dims::new(self.tau, self.t_f)?;
        if self.stride == 0 || self.local_epochs == 0 || self.aggregate_every == 0 || self.deep_rounds == 0 {
            invalid!("stride, local_epochs, aggregate_every and deep_rounds must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            invalid!("train_fraction must lie in (0, 1)");
        }
        if !(self.mix0 > 0.0 && self.mix0 <= 1.0) || !(self.decay >= 0.0) {
            invalid!("need mix0 in (0, 1] and decay ≥ 0");
        }
        if !(0.0..=1.0).contains(&self.shallow_weight) {
            invalid!("shallow_weight must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.afl_deadline_quantile) {
            invalid!("afl_deadline_quantile must lie in [0, 1]");
        }
        if self.committee_size == 0 {
            invalid!("committee_size must be positive");
        }
        let (lo, hi) = self.xi_range;
        let (tlo, thi) = self.tau_rate_range;
        if !(lo > 0.0 && hi >= lo && tlo > 0.0 && thi >= tlo) {
            invalid!("compute and uplink rate ranges must be positive and ordered");
        }
        let (slo, shi) = self.s_comm_range;
        if !(0.0 <= slo && slo <= shi && shi <= 1.0) {
            invalid!("s_comm_range must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.bad_fraction) {
            invalid!("bad_fraction must lie in [0, 1]");
        }
        if !(self.lr > 0.0) || !(self.beta_m > 0.0) {
            invalid!("lr and beta_m must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpSettings {
    pub enabled: bool,
    pub epsilon: f64,
    pub sensitivity_s: f64,
    /// Perturb shares on every this many slots.
    pub every: usize,
}

impl Default for DpSettings {
    fn default() -> Self {
        let d = DpConfig::default();
        Self {
            enabled: true,
            epsilon: d.epsilon,
            sensitivity_s: d.sensitivity_s,
            every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepConfig {
    pub gamma: f64,
    pub sim_threshold: f64,
    pub eps_lcs: f64,
    pub weights: SimWeights,
    /// Vehicles within this many meters observe each other and gossip.
    pub comm_radius: f64,
    pub gossip_fanout: usize,
    pub gossip_rounds: usize,
    /// Initial packet-success estimate before any interaction.
    pub prior_s: f64,
}

impl Default for RepConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            sim_threshold: 0.8,
            eps_lcs: 2.0,
            weights: SimWeights::default(),
            comm_radius: 100.0,
            gossip_fanout: 2,
            gossip_rounds: 2,
            prior_s: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DrlAlgo {
    #[default]
    Ppo,
    Dqn,
    /// Highest-reputation-first selection without training.
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrlConfig {
    pub algo: DrlAlgo,
    pub env: EnvConfig,
    pub ppo: PpoHyper,
    pub dqn: DqnHyper,
    /// Retrain the selector every this many slots.
    pub retrain_every: usize,
}

impl Default for DrlConfig {
    fn default() -> Self {
        Self {
            algo: DrlAlgo::Ppo,
            env: EnvConfig {
                r0: 1000.0,
                ..EnvConfig::default()
            },
            ppo: PpoHyper {
                episodes: 300,
                ..PpoHyper::default()
            },
            dqn: DqnHyper {
                episodes: 300,
                ..DqnHyper::default()
            },
            retrain_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub fl: FlConfig,
    pub dp: DpSettings,
    pub drl: DrlConfig,
    pub reputation: RepConfig,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.fl.validate()?;
        if self.dp.enabled {
            DpConfig {
                epsilon: self.dp.epsilon,
                sensitivity_s: self.dp.sensitivity_s,
                seed: 0,
            }
            .validate()?;
        }
        if self.dp.every == 0 || self.drl.retrain_every == 0 {
            invalid!("dp.every and drl.retrain_every must be positive");
        }
        self.reputation.weights.validate()?;
        if !(0.0..=1.0).contains(&self.reputation.gamma) || !(0.0..=1.0).contains(&self.reputation.prior_s) {
            invalid!("reputation gamma and prior_s must lie in [0, 1]");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Aggregation primitives

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub params: ModelParams,
    pub version: u64,
    pub slot: u64,
}

/// Weight-normalized coordinate-wise average.
pub fn fedavg(params_list: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    if params_list.is_empty() || params_list.len() != weights.len() {
        invalid!("fedavg needs one weight per model and at least one model");
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        invalid!("fedavg weights must be non-negative");
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        invalid!("fedavg weights sum to zero");
    }
    let mut out = ModelParams::zeros(params_list[0].dims);
    for (p, w) in params_list.iter().zip(weights) {
        out.check_dims(p)?;
        out.axpy(w / total, p)?;
    }
    Ok(out)
}

/// Staleness-discounted mixing weight `mix0 / (1 + decay · staleness)`.
pub fn mixing_weight(staleness: f64, mix0: f64, decay: f64) -> Result<f64> {
    if !(staleness >= 0.0) {
        invalid!("staleness must be non-negative, got {staleness}");
    }
    if !(mix0 > 0.0 && mix0 <= 1.0) || !(decay >= 0.0) {
        invalid!("need mix0 in (0, 1] and decay ≥ 0");
    }
    Ok(mix0 / (1.0 + decay * staleness))
}

pub fn async_update(
    global: &GlobalModel,
    incoming: &ModelParams,
    staleness: f64,
    mix0: f64,
    decay: f64,
) -> Result<GlobalModel> {
    global.params.check_dims(incoming)?;
    let alpha = mixing_weight(staleness, mix0, decay)?;
    Ok(mix_into(global, incoming, alpha))
}

fn mix_into(global: &GlobalModel, incoming: &ModelParams, alpha: f64) -> GlobalModel {
    let values = global
        .params
        .values
        .iter()
        .zip(&incoming.values)
        .map(|(g, x)| (1.0 - alpha) * g + alpha * x)
        .collect();
    GlobalModel {
        params: ModelParams {
            dims: global.params.dims,
            values,
        },
        version: global.version + 1,
        slot: global.slot,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMember {
    pub id: u32,
    pub params: ModelParams,
    pub reputation: f64,
    pub staleness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateOpts {
    pub deep_rounds: usize,
    pub shallow_weight: f64,
    pub mix0: f64,
    pub decay: f64,
}

fn group_average(members: &[GroupMember]) -> Result<(ModelParams, f64, f64)> {
    let weights: Vec<f64> = members.iter().map(|m| m.reputation.max(0.0)).collect();
    let total: f64 = weights.iter().sum();
    let weights = if total > 0.0 { weights } else { vec![1.0; members.len()] };
    let total: f64 = weights.iter().sum();
    let refs: Vec<&ModelParams> = members.iter().map(|m| &m.params).collect();
    let avg = fedavg(&refs, &weights)?;
    let staleness = members.iter().zip(&weights).map(|(m, w)| m.staleness * w).sum::<f64>() / total;
    Ok((avg, staleness, members.iter().map(|m| m.reputation.max(0.0)).sum()))
}

/// Merge the high group over `deep_rounds` passes, then the low group once.
///
/// Each pass mixes the reputation-weighted group average into the global
/// model with the staleness-discounted weight. The low group's weight is
/// further scaled by `shallow_weight` and by its share of the total
/// reputation mass, so that one pass with `mix0 = 1`, `shallow_weight = 1`
/// and equal reputations reproduces FedAvg over both groups.
pub fn grouped_aggregate(
    global: &GlobalModel,
    high: &[GroupMember],
    low: &[GroupMember],
    opts: &AggregateOpts,
) -> Result<GlobalModel> {
    let high_ids: BTreeSet<u32> = high.iter().map(|m| m.id).collect();
    if high_ids.len() != high.len() || low.iter().any(|m| high_ids.contains(&m.id)) {
        invalid!("high and low groups must be disjoint");
    }
    if opts.deep_rounds == 0 {
        invalid!("deep_rounds must be at least 1");
    }
    if !(0.0..=1.0).contains(&opts.shallow_weight) {
        invalid!("shallow_weight must lie in [0, 1]");
    }
    let mut g = global.clone();
    let mut high_mass = 0.0;
    if !high.is_empty() {
        let (avg, staleness, mass) = group_average(high)?;
        high_mass = mass;
        for _ in 0..opts.deep_rounds {
            g = async_update(&g, &avg, staleness, opts.mix0, opts.decay)?;
        }
    }
    if !low.is_empty() && opts.shallow_weight > 0.0 {
        let (avg, staleness, low_mass) = group_average(low)?;
        let share = if high.is_empty() || high_mass + low_mass <= 0.0 {
            1.0
        } else {
            low_mass / (high_mass + low_mass)
        };
        let alpha = opts.shallow_weight * share * mixing_weight(staleness, opts.mix0, opts.decay)?;
        g.params.check_dims(&avg)?;
        g = mix_into(&g, &avg, alpha);
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Vehicles and committee validation

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleNode {
    pub id: u32,
    pub data: SceneBatch,
    /// Latest local model.
    pub params: ModelParams,
    pub xi: f64,
    pub tau_rate: f64,
    pub s_comm: f64,
    pub reputation: f64,
    pub position: Xy,
    /// The vehicle's own track as it reports it.
    pub reported_track: Track,
    /// Simulation ground truth; never consulted by the learning pipeline.
    pub is_bad: bool,
}

impl VehicleNode {
    pub fn data_size(&self) -> f64 {
        self.data.samples() as f64
    }

    pub fn resources(&self, model_size: f64) -> NodeResources {
        NodeResources {
            data_size: self.data_size(),
            xi: self.xi,
            tau_rate: self.tau_rate,
            model_size,
        }
    }
}

/// Top `k` vehicles by reputation, ties by id.
pub fn select_committee(nodes: &[VehicleNode], k: usize) -> Result<Vec<&VehicleNode>> {
    if k == 0 {
        invalid!("committee size must be positive");
    }
    if k > nodes.len() {
        invalid!("committee of {k} from {} vehicles", nodes.len());
    }
    let mut order: Vec<&VehicleNode> = nodes.iter().collect();
    order.sort_by(|a, b| b.reputation.total_cmp(&a.reputation).then(a.id.cmp(&b.id)));
    order.truncate(k);
    Ok(order)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PorVerdict {
    pub accepted: bool,
    pub member_losses: Vec<f64>,
    pub median: f64,
}

/// Committee weight `1 + |d_j| / Σ|d_i|`.
pub fn por_weight(data_size: f64, total: f64) -> Result<f64> {
    if !(total > 0.0) || data_size < 0.0 {
        invalid!("committee data sizes must be positive");
    }
    Ok(1.0 + data_size / total)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Committee losses `γ_j · Loss(candidate on j's data) + mean(local_losses)`
/// and the median-based verdict.
pub fn por_validate(
    candidate: &ModelParams,
    committee: &[&VehicleNode],
    local_losses: &[f64],
    threshold: f64,
) -> Result<PorVerdict> {
    if committee.is_empty() {
        invalid!("validation committee is empty");
    }
    if committee.iter().any(|m| m.data.samples() == 0) {
        invalid!("committee member without data");
    }
    let total: f64 = committee.iter().map(|m| m.data_size()).sum();
    let local_term = if local_losses.is_empty() {
        0.0
    } else {
        local_losses.iter().sum::<f64>() / local_losses.len() as f64
    };
    let member_losses = committee
        .iter()
        .map(|m| Ok(por_weight(m.data_size(), total)? * batch_loss(candidate, &m.data)? + local_term))
        .collect::<Result<Vec<f64>>>()?;
    let median = median(&member_losses);
    Ok(PorVerdict {
        accepted: median <= threshold,
        member_losses,
        median,
    })
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SlotCosts {
    pub rol: f64,
    /// Mean local training time over the selection, seconds.
    pub c_a: f64,
    /// Mean upload time over the selection, seconds.
    pub c_u: f64,
    /// `mean(C_a + C_u)`.
    pub c_te: f64,
    /// `rol + c_te`.
    pub c_f: f64,
}

pub fn slot_costs(selected: &[usize], nodes: &[NodeResources], reps: &[f64], beta_m: f64, form: RolForm) -> Result<SlotCosts> {
    if selected.is_empty() {
        return Ok(SlotCosts::default());
    }
    let (mut ca, mut cu) = (0.0, 0.0);
    for &i in selected {
        let Some(node) = nodes.get(i) else {
            invalid!("selected vehicle {i} out of range");
        };
        let (a, u) = time_cost(node, beta_m)?;
        ca += a;
        cu += u;
    }
    let k = selected.len() as f64;
    let rol = rol_cost(selected, reps, form)?;
    let c_te = (ca + cu) / k;
    Ok(SlotCosts {
        rol,
        c_a: ca / k,
        c_u: cu / k,
        c_te,
        c_f: rol + c_te,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub slot: u64,
    pub mode: Mode,
    /// Vehicles whose shares arrived this slot.
    pub selected: Vec<u32>,
    pub high_group: Vec<u32>,
    pub low_group: Vec<u32>,
    pub costs: SlotCosts,
    pub global_loss: f64,
    pub metrics: Metrics,
    pub accepted: bool,
    pub global_version: u64,
    pub duration: f64,
    pub sim_time: f64,
    pub reputations: BTreeMap<u32, f64>,
}

// ---------------------------------------------------------------------------
// World

#[derive(Debug, Clone, PartialEq)]
struct Job {
    base_version: u64,
    local: ModelParams,
    shared: ModelParams,
    local_loss: f64,
    arrival: f64,
}

#[derive(Debug, Clone)]
pub struct World {
    pub cfg: SimConfig,
    pub seed: u64,
    pub dims: Dims,
    pub nodes: Vec<VehicleNode>,
    pub global: GlobalModel,
    pub eval: SceneBatch,
    pub dags: Vec<LocalDag>,
    pub topology: Topology,
    pub sim_time: f64,
    /// Observed trajectories by vehicle id, clean.
    clean: Scene,
    /// `stats[j][i]`: observer `j`'s interaction record about `i`.
    stats: Vec<Vec<InteractionStats>>,
    jobs: Vec<Option<Job>>,
    synced: Vec<u64>,
    policy: Option<PolicyParams>,
    interaction_frames: (u32, u32),
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return 0.0;
    }
    let idx = ((v.len() - 1) as f64 * q).round() as usize;
    v[idx.min(v.len() - 1)]
}

/// Laplace-perturb an opinion's components and project the result back onto
/// valid opinions (clamp at zero, renormalize; vacuous if nothing remains).
pub fn privatize_opinion(op: &Opinion, dp: &DpSettings, seed: u64) -> Result<Opinion> {
    let noisy = privatize(
        &[op.r, op.d, op.u],
        &DpConfig {
            epsilon: dp.epsilon,
            sensitivity_s: dp.sensitivity_s,
            seed,
        },
    )?;
    let c: Vec<f64> = noisy.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = c.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Ok(Opinion::vacuous());
    }
    let (r, d) = (c[0] / total, c[1] / total);
    Ok(Opinion { r, d, u: (1.0 - r - d).max(0.0) })
}

fn shard_for(view: &Scene, id: u32, cfg: &FlConfig) -> Result<SceneBatch> {
    let windows = if view.len_frames() >= cfg.tau + cfg.t_f {
        window(view, cfg.tau, cfg.t_f, cfg.stride)?
    } else {
        Vec::new()
    };
    let mut own = Vec::new();
    for w in windows {
        let Some(me) = w.vehicle_ids.iter().position(|&v| v == id) else {
            continue;
        };
        let a = w.anchors[me];
        let keep: Vec<usize> = (0..w.n_vehicles())
            .filter(|&k| (w.anchors[k][0] - a[0]).hypot(w.anchors[k][1] - a[1]) <= cfg.sensing_radius)
            .collect();
        own.push(w.select(&keep));
    }
    SceneBatch::new(own, &cfg.adjacency)
}

impl World {
    pub fn new(scene: &Scene, cfg: &SimConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        scene.validate()?;
        let fl = &cfg.fl;
        let dims = Dims::new(fl.tau, fl.t_f)?;
        let Some((lo, hi)) = scene.frame_range() else {
            invalid!("scene has no tracks");
        };
        let len = (hi - lo + 1) as usize;
        let split = lo + (fl.train_fraction * len as f64).floor() as u32;
        let train = scene.slice_frames(lo, split);
        let test = scene.slice_frames(split, hi + 1);
        if train.len_frames() < fl.tau + fl.t_f || test.len_frames() < fl.tau + fl.t_f {
            invalid!("scene of {len} frames is too short to split into training and evaluation windows");
        }
        let eval = SceneBatch::new(window(&test, fl.tau, fl.t_f, fl.t_f)?, &fl.adjacency)?;

        let (_, bad_ids) = inject_bad_nodes(
            &train,
            fl.bad_fraction,
            fl.corruption,
            fl.corruption_magnitude,
            rng::derive_seed(seed, "bad-nodes", &[]),
        )?;
        let init = init_params(dims, fl.init_scale, rng::derive_seed(seed, "init", &[]))?;
        let mut nodes = Vec::with_capacity(train.tracks.len());
        for track in &train.tracks {
            let id = track.vehicle_id;
            let is_bad = bad_ids.contains(&id);
            let view = if is_bad {
                inject_bad_nodes(
                    &train,
                    1.0,
                    fl.corruption,
                    fl.corruption_magnitude,
                    rng::derive_seed(seed, "bad-view", &[id as u64]),
                )?
                .0
            } else {
                train.clone()
            };
            let mut r = rng::substream(seed, "resources", &[id as u64]);
            let (xlo, xhi) = fl.xi_range;
            let xi = if xhi > xlo {
                (r.random_range(xlo.ln()..xhi.ln())).exp()
            } else {
                xlo
            };
            let (tlo, thi) = fl.tau_rate_range;
            let tau_rate = if thi > tlo { r.random_range(tlo..thi) } else { tlo };
            let (slo, shi) = fl.s_comm_range;
            let s_comm = if shi > slo { r.random_range(slo..shi) } else { slo };
            let reported_track = view.track(id).cloned().unwrap_or_else(|| track.clone());
            nodes.push(VehicleNode {
                id,
                data: shard_for(&view, id, fl)?,
                params: init.clone(),
                xi,
                tau_rate,
                s_comm,
                reputation: final_reputation(&Opinion::vacuous(), cfg.reputation.gamma)?,
                position: track.points[0].xy(),
                reported_track,
                is_bad,
            });
        }
        if nodes.is_empty() {
            invalid!("no vehicles in the training frames");
        }
        let positions: Vec<Xy> = nodes.iter().map(|n| n.position).collect();
        let topology = Topology::from_positions(&positions, cfg.reputation.comm_radius);
        let n = nodes.len();
        let stats = vec![vec![InteractionStats::new(cfg.reputation.prior_s); n]; n];
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            dims,
            global: GlobalModel {
                params: init,
                version: 0,
                slot: 0,
            },
            eval,
            dags: vec![LocalDag::new(); n],
            topology,
            sim_time: 0.0,
            clean: train,
            stats,
            jobs: vec![None; n],
            synced: vec![0; n],
            policy: None,
            interaction_frames: (lo, split),
            nodes,
        })
    }

    pub fn model_size(&self) -> f64 {
        self.cfg.fl.model_size.unwrap_or(self.dims.param_count() as f64)
    }

    pub fn resources(&self) -> Vec<NodeResources> {
        let size = self.model_size();
        self.nodes.iter().map(|n| n.resources(size)).collect()
    }

    pub fn reputations(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.reputation).collect()
    }

    /// Held-out metrics of the current global model.
    pub fn evaluate(&self) -> Result<(Metrics, f64)> {
        let preds = forward(&self.global.params, &self.eval)?;
        let mut acc = MetricsAccumulator::default();
        for (p, w) in preds.iter().zip(&self.eval.windows) {
            acc = acc.add(p, &w.future)?;
        }
        Ok((acc.finish(), batch_loss(&self.global.params, &self.eval)?))
    }

    fn dp_active(&self, slot: u64, mode: Mode) -> bool {
        let dp = &self.cfg.dp;
        mode != Mode::NoDp && dp.enabled && slot % dp.every as u64 == 0
    }

    fn job_time(&self, i: usize) -> Result<f64> {
        let (ca, cu) = time_cost(&self.nodes[i].resources(self.model_size()), self.cfg.fl.beta_m)?;
        Ok(ca + cu)
    }

    fn start_job(&mut self, i: usize, slot: u64, mode: Mode, start: f64) -> Result<()> {
        let node = &self.nodes[i];
        let fresh = self.global.version > self.synced[i] || self.global.version == 0;
        let base = if fresh { &self.global.params } else { &node.params };
        let base_version = self.global.version;
        let (local, local_loss) = if node.data.is_empty() {
            (base.clone(), f64::NAN)
        } else {
            local_train(base, &node.data, self.cfg.fl.local_epochs, self.cfg.fl.lr)?
        };
        let dp = &self.cfg.dp;
        let shared = if self.dp_active(slot, mode) {
            let delta = local.delta(base)?;
            let noisy = privatize(
                &delta.values,
                &DpConfig {
                    epsilon: dp.epsilon,
                    sensitivity_s: dp.sensitivity_s,
                    seed: rng::derive_seed(self.seed, "dp", &[slot, node.id as u64]),
                },
            )?;
            let mut s = base.clone();
            s.axpy(1.0, &ModelParams::from_values(self.dims, noisy)?)?;
            s
        } else {
            local.clone()
        };
        self.synced[i] = base_version;
        let arrival = start + self.job_time(i)?;
        self.jobs[i] = Some(Job {
            base_version,
            local,
            shared,
            local_loss,
            arrival,
        });
        Ok(())
    }

    fn segment_frames(&self, slot: u64) -> (u32, u32) {
        let (lo, hi) = self.interaction_frames;
        let tau = self.cfg.fl.tau as u32;
        let span = (hi - lo).saturating_sub(tau).max(1);
        let start = lo + ((slot as u32).wrapping_mul(tau)) % span;
        (start, start + tau)
    }

    fn segment_of(track: &Track, frames: (u32, u32)) -> Option<TrajectorySegment> {
        let points: Vec<_> = track
            .points
            .iter()
            .filter(|p| p.t >= frames.0 && p.t < frames.1)
            .copied()
            .collect();
        (points.len() >= 2).then(|| TrajectorySegment::new(points))
    }

    /// Neighbours compare each vehicle's self-report with what they observed.
    fn interact(&mut self, slot: u64) -> Result<()> {
        let frames = self.segment_frames(slot);
        let rep = &self.cfg.reputation;
        for j in 0..self.nodes.len() {
            for &i in self.topology.neighbors(j) {
                let subject = &self.nodes[i];
                let (Some(reported), Some(observed)) = (
                    Self::segment_of(&subject.reported_track, frames),
                    self.clean.track(subject.id).and_then(|t| Self::segment_of(t, frames)),
                ) else {
                    continue;
                };
                let mut r = rng::substream(self.seed, "deliver", &[slot, j as u64, i as u64]);
                let delivered = r.random::<f64>() < subject.s_comm;
                let s = sim(&reported, &observed, &rep.weights, rep.eps_lcs)?;
                self.stats[j][i] = count_interaction(&self.stats[j][i], s, rep.sim_threshold, delivered);
            }
        }
        Ok(())
    }

    fn publish_and_gossip(&mut self, slot: u64, arrivals: &[usize], mode: Mode) -> Result<()> {
        let private = self.dp_active(slot, mode);
        for &i in arrivals {
            let job = self.jobs[i].as_ref().expect("arrival has a job");
            let payload = serde_json::json!({
                "slot": slot,
                "base_version": job.base_version,
                "l1": job.shared.values.iter().map(|v| v.abs()).sum::<f64>(),
            })
            .to_string();
            let author = self.nodes[i].id;
            self.dags[i].append(TxKind::ModelShare, payload, author, slot)?;
        }
        for j in 0..self.nodes.len() {
            let opinions: Vec<(u32, Opinion)> = self
                .topology
                .neighbors(j)
                .iter()
                .filter(|&&i| self.stats[j][i].events() > 0)
                .map(|&i| {
                    let op = local_opinion(&self.stats[j][i])?;
                    let subject = self.nodes[i].id;
                    if private {
                        let seed = rng::derive_seed(self.seed, "dp-opinion", &[slot, j as u64, subject as u64]);
                        Ok((subject, privatize_opinion(&op, &self.cfg.dp, seed)?))
                    } else {
                        Ok((subject, op))
                    }
                })
                .collect::<Result<_>>()?;
            let payload = serde_json::to_string(&opinions).expect("opinions serialize");
            let author = self.nodes[j].id;
            self.dags[j].append(TxKind::ReputationUpdate, payload, author, slot)?;
        }
        for round in 0..self.cfg.reputation.gossip_rounds {
            let seed = rng::derive_seed(self.seed, "gossip", &[slot, round as u64]);
            self.dags = gossip_round(&self.dags, &self.topology, self.cfg.reputation.gossip_fanout, seed)?;
        }
        Ok(())
    }

    /// Fuse each observer's local opinion with the recommendations found in
    /// its DAG; a vehicle's reputation is the mean over its observers.
    fn update_reputations(&mut self) -> Result<()> {
        let n = self.nodes.len();
        let gamma = self.cfg.reputation.gamma;
        let index: BTreeMap<u32, usize> = self.nodes.iter().enumerate().map(|(k, v)| (v.id, k)).collect();
        let prev: Vec<f64> = self.reputations();
        let mut sums = vec![0.0; n];
        let mut counts = vec![0usize; n];
        for j in 0..n {
            // Latest opinions published by every other vehicle, as seen by j.
            let mut recs: BTreeMap<usize, Vec<Recommendation>> = BTreeMap::new();
            for (k, other) in self.nodes.iter().enumerate() {
                if k == j {
                    continue;
                }
                let Some(tx) = self.dags[j].latest_by(other.id, TxKind::ReputationUpdate) else {
                    continue;
                };
                let opinions: Vec<(u32, Opinion)> = serde_json::from_str(&tx.payload).map_err(|e| Error::Parse {
                    line: e.line(),
                    msg: format!("reputation payload: {e}"),
                })?;
                for (subject, op) in opinions {
                    if let Some(&i) = index.get(&subject) {
                        if i != j && op.is_valid() && prev[k] > 0.0 {
                            recs.entry(i).or_default().push(Recommendation {
                                delta: prev[k],
                                opinion: op,
                            });
                        }
                    }
                }
            }
            for i in 0..n {
                if i == j || self.stats[j][i].events() == 0 {
                    continue;
                }
                let local = local_opinion(&self.stats[j][i])?;
                let fused = match recs.get(&i) {
                    Some(list) if !list.is_empty() => fuse_or_average(&local, &combine_recommendations(list)?)?,
                    _ => local,
                };
                sums[i] += final_reputation(&fused, gamma)?;
                counts[i] += 1;
            }
        }
        for i in 0..n {
            if counts[i] > 0 {
                self.nodes[i].reputation = (sums[i] / counts[i] as f64).clamp(0.0, 1.0);
            }
        }
        Ok(())
    }

    pub fn select_world(&self) -> SelectWorld {
        SelectWorld {
            reps: self.reputations(),
            nodes: self.resources(),
            positions: self.nodes.iter().map(|n| n.position).collect(),
        }
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            n_vehicles: self.nodes.len(),
            beta_m: self.cfg.fl.beta_m,
            rol_form: self.cfg.fl.rol_form,
            ..self.cfg.drl.env.clone()
        }
    }

    /// Indices of the high and low groups chosen by the selector.
    pub fn groups(&mut self, slot: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        let cfg = self.env_config();
        let world = self.select_world();
        let drl_cfg = &self.cfg.drl;
        if drl_cfg.algo == DrlAlgo::Greedy {
            let (picks, _) = drl::rollout(&cfg, &world, 0, drl::greedy_action)?;
            let mut high = picks;
            high.sort_unstable();
            let low = (0..self.nodes.len()).filter(|i| !high.contains(i)).collect();
            return Ok((high, low));
        }
        if self.policy.is_none() || slot % drl_cfg.retrain_every as u64 == 0 {
            let seed = rng::derive_seed(self.seed, "selector", &[slot]);
            let trained = match drl_cfg.algo {
                DrlAlgo::Ppo => ppo_train(&cfg, &world, &drl_cfg.ppo, seed)?,
                DrlAlgo::Dqn => dqn_train(&cfg, &world, &drl_cfg.dqn, seed)?,
                DrlAlgo::Greedy => unreachable!(),
            };
            self.policy = Some(trained.policy);
        }
        drl::policy_group(self.policy.as_ref().expect("policy trained"), &cfg, &world)
    }

    /// Advance the simulation by one slot.
    pub fn run_slot(&mut self, slot: u64, mode: Mode) -> Result<RoundReport> {
        let n = self.nodes.len();
        let start = self.sim_time;
        let barrier = mode == Mode::Sfl;
        for i in 0..n {
            if self.jobs[i].is_none() {
                self.start_job(i, slot, mode, start)?;
            }
        }
        let pending: Vec<f64> = self.jobs.iter().flatten().map(|j| j.arrival - start).collect();
        let end = if barrier {
            start + pending.iter().copied().fold(0.0, f64::max)
        } else {
            let earliest = pending.iter().copied().fold(f64::INFINITY, f64::min);
            let deadline = (0..n).map(|i| self.job_time(i)).collect::<Result<Vec<_>>>()?;
            start + quantile(&deadline, self.cfg.fl.afl_deadline_quantile).max(earliest)
        };
        let arrivals: Vec<usize> = (0..n)
            .filter(|&i| self.jobs[i].as_ref().is_some_and(|j| j.arrival <= end))
            .collect();

        self.interact(slot)?;
        self.publish_and_gossip(slot, &arrivals, mode)?;
        self.update_reputations()?;

        let (mut high, mut low) = if mode == Mode::NoDrl || mode == Mode::Sfl {
            ((0..n).collect::<Vec<_>>(), Vec::new())
        } else {
            self.groups(slot)?
        };
        if mode == Mode::LowRPriority {
            std::mem::swap(&mut high, &mut low);
        }

        let mut accepted = false;
        let aggregate = !arrivals.is_empty() && slot % self.cfg.fl.aggregate_every as u64 == 0;
        if aggregate {
            let jobs: Vec<&Job> = arrivals.iter().map(|&i| self.jobs[i].as_ref().unwrap()).collect();
            let candidate = if barrier {
                let refs: Vec<&ModelParams> = jobs.iter().map(|j| &j.shared).collect();
                let weights: Vec<f64> = arrivals.iter().map(|&i| self.nodes[i].data_size().max(1.0)).collect();
                GlobalModel {
                    params: fedavg(&refs, &weights)?,
                    version: self.global.version + 1,
                    slot,
                }
            } else {
                let member = |i: usize, job: &Job| GroupMember {
                    id: self.nodes[i].id,
                    params: job.shared.clone(),
                    reputation: self.nodes[i].reputation,
                    staleness: (self.global.version - job.base_version) as f64,
                };
                let pick = |group: &[usize]| -> Vec<GroupMember> {
                    arrivals
                        .iter()
                        .zip(&jobs)
                        .filter(|(i, _)| group.contains(i))
                        .map(|(&i, j)| member(i, j))
                        .collect()
                };
                let fl = &self.cfg.fl;
                grouped_aggregate(
                    &self.global,
                    &pick(&high),
                    &pick(&low),
                    &AggregateOpts {
                        deep_rounds: fl.deep_rounds,
                        shallow_weight: fl.shallow_weight,
                        mix0: fl.mix0,
                        decay: fl.decay,
                    },
                )?
            };
            let local_losses: Vec<f64> = jobs.iter().map(|j| j.local_loss).filter(|l| l.is_finite()).collect();
            let with_data: Vec<VehicleNode> = self.nodes.iter().filter(|v| !v.data.is_empty()).cloned().collect();
            let k = self.cfg.fl.committee_size.min(with_data.len());
            accepted = if k == 0 {
                true
            } else {
                let committee = select_committee(&with_data, k)?;
                let incumbent = por_validate(&self.global.params, &committee, &local_losses, f64::INFINITY)?;
                let threshold = incumbent.median * (1.0 + self.cfg.fl.por_tolerance);
                por_validate(&candidate.params, &committee, &local_losses, threshold)?.accepted
            };
            if accepted && candidate.params.is_finite() {
                self.global = GlobalModel {
                    params: candidate.params,
                    version: self.global.version + 1,
                    slot,
                };
            } else {
                accepted = false;
            }
        }
        for &i in &arrivals {
            let job = self.jobs[i].take().expect("arrival has a job");
            self.nodes[i].params = job.local;
        }

        let reps = self.reputations();
        let costs = slot_costs(&arrivals, &self.resources(), &reps, self.cfg.fl.beta_m, self.cfg.fl.rol_form)?;
        let (metrics, global_loss) = self.evaluate()?;
        self.sim_time = end;
        let ids = |v: &[usize]| v.iter().map(|&i| self.nodes[i].id).collect::<Vec<_>>();
        Ok(RoundReport {
            slot,
            mode,
            selected: ids(&arrivals),
            high_group: ids(&high),
            low_group: ids(&low),
            costs,
            global_loss,
            metrics,
            accepted,
            global_version: self.global.version,
            duration: end - start,
            sim_time: end,
            reputations: self.nodes.iter().map(|v| (v.id, v.reputation)).collect(),
        })
    }

    /// Run `slots` consecutive slots starting at slot 0.
    pub fn run(&mut self, slots: usize, mode: Mode) -> Result<Vec<RoundReport>> {
        (0..slots as u64).map(|s| self.run_slot(s, mode)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(values: Vec<f64>) -> ModelParams {
        ModelParams::from_values(Dims::new(2, 1).unwrap(), values).unwrap()
    }

    fn constant(v: f64) -> ModelParams {
        p(vec![v; Dims::new(2, 1).unwrap().param_count()])
    }

    fn global(v: f64) -> GlobalModel {
        GlobalModel {
            params: constant(v),
            version: 0,
            slot: 0,
        }
    }

    #[test]
    fn fedavg_cases() {
        let a = constant(1.0);
        let b = constant(3.0);
        assert_eq!(fedavg(&[&a], &[2.0]).unwrap(), a);
        assert_eq!(fedavg(&[&a, &b], &[1.0, 1.0]).unwrap(), constant(2.0));
        assert!(fedavg(&[&a, &b], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn async_update_cases() {
        let g = global(0.0);
        let x = constant(4.0);
        let r = async_update(&g, &x, 0.0, 1.0, 0.5).unwrap();
        assert_eq!(r.params, x);
        assert_eq!(r.version, 1);
        assert_eq!(mixing_weight(0.0, 0.6, 0.0).unwrap(), mixing_weight(9.0, 0.6, 0.0).unwrap());
        let ratio = mixing_weight(0.0, 0.5, 1.0).unwrap() / mixing_weight(5.0, 0.5, 1.0).unwrap();
        assert!((ratio - 6.0).abs() < 1e-12);
        assert!(async_update(&g, &x, -1.0, 1.0, 0.5).is_err());
    }

    fn member(id: u32, v: f64, rep: f64) -> GroupMember {
        GroupMember {
            id,
            params: constant(v),
            reputation: rep,
            staleness: 0.0,
        }
    }

    #[test]
    fn grouped_aggregate_cases() {
        let opts = AggregateOpts {
            deep_rounds: 3,
            shallow_weight: 0.0,
            mix0: 0.5,
            decay: 0.0,
        };
        let g = global(0.0);
        let high = [member(1, 8.0, 0.9)];
        let low = [member(2, -100.0, 0.1)];
        let ignored = grouped_aggregate(&g, &high, &low, &opts).unwrap();
        let alone = grouped_aggregate(&g, &high, &[], &opts).unwrap();
        assert_eq!(ignored.params, alone.params);
        // Three halvings of the gap to 8.
        assert!((alone.params.values[0] - 7.0).abs() < 1e-12);
        assert!(grouped_aggregate(&g, &high, &[member(1, 0.0, 0.5)], &opts).is_err());
    }

    #[test]
    fn committee_ties_break_by_id() {
        let base = |id: u32, rep: f64| VehicleNode {
            id,
            data: SceneBatch::with_adjacency(Vec::new(), Vec::new()).unwrap(),
            params: constant(0.0),
            xi: 1.0,
            tau_rate: 1.0,
            s_comm: 1.0,
            reputation: rep,
            position: [0.0, 0.0],
            reported_track: Track {
                vehicle_id: id,
                points: Vec::new(),
                is_bad: false,
            },
            is_bad: false,
        };
        let nodes = vec![base(5, 0.7), base(2, 0.9), base(3, 0.7), base(9, 0.1)];
        let c = select_committee(&nodes, 3).unwrap();
        assert_eq!(c.iter().map(|v| v.id).collect::<Vec<_>>(), vec![2, 3, 5]);
        assert_eq!(select_committee(&nodes, 4).unwrap().len(), 4);
        assert!(select_committee(&nodes, 0).is_err());
        assert!(select_committee(&nodes, 5).is_err());
    }

    #[test]
    fn por_weight_case() {
        assert_eq!(por_weight(100.0, 400.0).unwrap(), 1.25);
    }

    #[test]
    fn slot_cost_toy() {
        let node = NodeResources {
            data_size: 1000.0,
            xi: 500.0,
            tau_rate: 50.0,
            model_size: 100.0,
        };
        let c = slot_costs(&[0, 1], &[node, node], &[1.0, 1.0], 2.0, RolForm::Surrogate).unwrap();
        assert_eq!((c.c_a, c.c_u, c.c_te, c.c_f), (4.0, 2.0, 6.0, 6.0));
    }
}
