//! The `run`, `ablate`, `sweep` and `drl` commands. Each is a pure function
//! of the scenario and seed; output files are written to a temporary name
//! and renamed into place.

use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{ScenarioConfig, SweepSpec, Variant};
use crate::drl::{curve_to_csv, dqn_train, ppo_train, TrainResult};
use crate::error::{Error, Result};
use crate::federation::{Mode, RoundReport, World};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub mode: Mode,
    pub slots: usize,
    /// Metrics of the initial global model.
    pub initial_ade: f64,
    pub ade: f64,
    pub fde: f64,
    pub rmse: f64,
    /// Sum of the per-slot `c_f`.
    pub total_cost: f64,
    pub accepted_slots: usize,
    pub sim_time: f64,
    pub durations: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub reports: Vec<RoundReport>,
    pub summary: RunSummary,
}

/// Run `cfg.slots` slots of `mode` on the scenario's scene with `seed`.
pub fn simulate(cfg: &ScenarioConfig, mode: Mode, seed: u64) -> Result<RunOutcome> {
    let scene = cfg.build_scene(seed)?;
    let mut world = World::new(&scene, &cfg.sim_config(), seed)?;
    let (initial, _) = world.evaluate()?;
    let reports = world.run(cfg.slots, mode)?;
    let last = reports.last().expect("at least one slot");
    let summary = RunSummary {
        seed,
        mode,
        slots: cfg.slots,
        initial_ade: initial.ade,
        ade: last.metrics.ade,
        fde: last.metrics.fde,
        rmse: last.metrics.rmse,
        total_cost: reports.iter().map(|r| r.costs.c_f).sum(),
        accepted_slots: reports.iter().filter(|r| r.accepted).count(),
        sim_time: world.sim_time,
        durations: reports.iter().map(|r| r.duration).collect(),
    };
    info!(
        "seed {seed} {mode:?}: ADE {:.4} -> {:.4}, {} of {} candidates accepted",
        summary.initial_ade, summary.ade, summary.accepted_slots, cfg.slots
    );
    Ok(RunOutcome { reports, summary })
}

/// Simulated time of the first slot whose global ADE is at most `target`.
pub fn time_to_target(reports: &[RoundReport], target: f64) -> Option<f64> {
    reports.iter().find(|r| r.metrics.ade <= target).map(|r| r.sim_time)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn out_file(out: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(out.join(name))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::Validation(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))
}

/// Writes `rounds.jsonl` and `summary.json` into `out`.
pub fn cmd_run(cfg: &ScenarioConfig, out: &Path) -> Result<RunSummary> {
    let outcome = simulate(cfg, cfg.mode, cfg.seed)?;
    let mut lines = String::new();
    for r in &outcome.reports {
        lines.push_str(&serde_json::to_string(r).expect("round report serializes"));
        lines.push('\n');
    }
    write_atomic(&out_file(out, "rounds.jsonl")?, lines.as_bytes())?;
    let summary = serde_json::to_string_pretty(&outcome.summary).expect("summary serializes");
    write_atomic(&out_file(out, "summary.json")?, summary.as_bytes())?;
    Ok(outcome.summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub ade: f64,
    pub fde: f64,
    pub rmse: f64,
    pub cost: f64,
}

/// Run every variant with the same seed.
pub fn ablate(cfg: &ScenarioConfig, variants: &[Variant], seed: u64) -> Result<Vec<AblationRow>> {
    if variants.len() < 2 {
        return Err(Error::Config(format!("ablation needs at least two variants, got {}", variants.len())));
    }
    variants
        .iter()
        .map(|&variant| {
            let s = simulate(cfg, variant.mode(), seed)?.summary;
            Ok(AblationRow {
                variant,
                ade: s.ade,
                fde: s.fde,
                rmse: s.rmse,
                cost: s.total_cost,
            })
        })
        .collect()
}

/// Writes `ablation.csv` (`variant,ade,fde,rmse,cost`).
pub fn cmd_ablate(cfg: &ScenarioConfig, variants: &[Variant], out: &Path) -> Result<Vec<AblationRow>> {
    let rows = ablate(cfg, variants, cfg.seed)?;
    write_atomic(&out_file(out, "ablation.csv")?, &csv_bytes(&rows)?)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub repeat: usize,
    pub ade: f64,
    pub fde: f64,
    pub rmse: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trend {
    Increasing,
    Decreasing,
    Flat,
    Mixed,
}

/// Direction of `ys`, ordered by their `xs`.
pub fn trend(xs: &[f64], ys: &[f64]) -> Trend {
    let mut pairs: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let steps: Vec<f64> = pairs.windows(2).map(|w| w[1].1 - w[0].1).collect();
    if steps.iter().all(|&d| d == 0.0) {
        Trend::Flat
    } else if steps.iter().all(|&d| d >= 0.0) {
        Trend::Increasing
    } else if steps.iter().all(|&d| d <= 0.0) {
        Trend::Decreasing
    } else {
        Trend::Mixed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub param: String,
    pub values: Vec<f64>,
    pub repeats: usize,
    /// Mean ADE per value, in `values` order.
    pub mean_ade: Vec<f64>,
    pub ade_spread: f64,
    pub trend: Trend,
}

/// Seed of a sweep repeat. Every value of one repeat shares it.
pub fn sweep_seed(seed: u64, repeat: usize) -> u64 {
    if repeat == 0 {
        seed
    } else {
        rng::derive_seed(seed, "sweep-repeat", &[repeat as u64])
    }
}

pub fn sweep(cfg: &ScenarioConfig, spec: &SweepSpec) -> Result<(Vec<SweepRow>, SweepMeta)> {
    spec.validate()?;
    let cells: Vec<ScenarioConfig> = spec
        .values
        .iter()
        .map(|&v| cfg.with_param(&spec.param, v))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(cells.len() * spec.repeats);
    for (cell, &value) in cells.iter().zip(&spec.values) {
        for repeat in 0..spec.repeats {
            let s = simulate(cell, cell.mode, sweep_seed(cfg.seed, repeat))?.summary;
            rows.push(SweepRow {
                value,
                repeat,
                ade: s.ade,
                fde: s.fde,
                rmse: s.rmse,
                cost: s.total_cost,
            });
        }
    }
    let mean_ade: Vec<f64> = rows
        .chunks(spec.repeats)
        .map(|c| c.iter().map(|r| r.ade).sum::<f64>() / c.len() as f64)
        .collect();
    let (lo, hi) = mean_ade
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| (lo.min(a), hi.max(a)));
    let meta = SweepMeta {
        param: spec.param.clone(),
        values: spec.values.clone(),
        repeats: spec.repeats,
        ade_spread: hi - lo,
        trend: trend(&spec.values, &mean_ade),
        mean_ade,
    };
    Ok((rows, meta))
}

/// Writes `sweep.csv` (`value,repeat,ade,fde,rmse,cost`) and `sweep_meta.json`.
pub fn cmd_sweep(cfg: &ScenarioConfig, spec: &SweepSpec, out: &Path) -> Result<(Vec<SweepRow>, SweepMeta)> {
    let (rows, meta) = sweep(cfg, spec)?;
    write_atomic(&out_file(out, "sweep.csv")?, &csv_bytes(&rows)?)?;
    let text = serde_json::to_string_pretty(&meta).expect("sweep metadata serializes");
    write_atomic(&out_file(out, "sweep_meta.json")?, text.as_bytes())?;
    Ok((rows, meta))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainAlgo {
    Ppo,
    Dqn,
}

impl TrainAlgo {
    pub fn name(self) -> &'static str {
        match self {
            TrainAlgo::Ppo => "ppo",
            TrainAlgo::Dqn => "dqn",
        }
    }
}

/// Train the selector standalone on the scenario's initial world.
pub fn train_selector(cfg: &ScenarioConfig, algo: TrainAlgo) -> Result<TrainResult> {
    let scene = cfg.build_scene(cfg.seed)?;
    let world = World::new(&scene, &cfg.sim_config(), cfg.seed)?;
    let env = world.env_config();
    let select = world.select_world();
    let seed = rng::derive_seed(cfg.seed, "drl-command", &[]);
    match algo {
        TrainAlgo::Ppo => ppo_train(&env, &select, &cfg.drl.ppo, seed),
        TrainAlgo::Dqn => dqn_train(&env, &select, &cfg.drl.dqn, seed),
    }
}

/// Writes `drl_<algo>.csv` and the trained network as `drl_<algo>_policy.json`.
pub fn cmd_drl(cfg: &ScenarioConfig, algo: TrainAlgo, out: &Path) -> Result<TrainResult> {
    let result = train_selector(cfg, algo)?;
    let name = algo.name();
    write_atomic(&out_file(out, &format!("drl_{name}.csv"))?, curve_to_csv(&result.curve).as_bytes())?;
    write_atomic(&out_file(out, &format!("drl_{name}_policy.json"))?, result.policy.to_json().as_bytes())?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trend_classification() {
        assert_eq!(trend(&[1.0, 2.0, 3.0], &[0.5, 0.4, 0.4]), Trend::Decreasing);
        assert_eq!(trend(&[3.0, 1.0, 2.0], &[0.6, 0.4, 0.5]), Trend::Increasing);
        assert_eq!(trend(&[1.0, 2.0], &[0.5, 0.5]), Trend::Flat);
        assert_eq!(trend(&[1.0, 2.0, 3.0], &[0.5, 0.7, 0.6]), Trend::Mixed);
    }

    #[test]
    fn single_variant_is_rejected() {
        let cfg = ScenarioConfig::standard(1);
        assert!(matches!(ablate(&cfg, &[Variant::Base], 1), Err(Error::Config(_))));
    }

    #[test]
    fn repeat_zero_uses_the_scenario_seed() {
        assert_eq!(sweep_seed(11, 0), 11);
        assert_ne!(sweep_seed(11, 1), sweep_seed(11, 2));
    }
}
