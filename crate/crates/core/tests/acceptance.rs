//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the report is always printed. A failing
//! criterion is reported, not raised; the process exits 0 either way.
//! `ACCEPTANCE_ONLY=drl,ablation` restricts the run to named criteria.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use repufed_core::config::{ScenarioConfig, SweepSpec, Variant};
use repufed_core::drl::costs::{NodeResources, RolForm};
use repufed_core::drl::ppo::episode_seed;
use repufed_core::drl::{
    dqn_train, episodes_to_reach, greedy_oracle_reward, ppo_train, random_policy_reward, tail_mean, DqnHyper,
    EnvConfig, PpoHyper, SelectWorld,
};
use repufed_core::experiment::{cmd_ablate, cmd_drl, cmd_run, cmd_sweep, simulate, time_to_target, TrainAlgo};
use repufed_core::federation::{por_weight, slot_costs, Mode, RoundReport};
use repufed_core::predictor::{backward, batch_loss, forward, Dims, ModelParams, SceneBatch};
use repufed_core::privacy::{laplace_cdf, laplace_perturb, privatize, DpConfig};
use repufed_core::reputation::gossip::consistent;
use repufed_core::reputation::{
    combine_recommendations, final_reputation, fuse_final, fuse_or_average, gossip_round, local_opinion, reputation,
    InteractionStats, LocalDag, Opinion, Recommendation, Topology, TxKind,
};
use repufed_core::scene::{metrics, window, ObservationWindow, Scene, Track, TrajectoryPoint, Xy};
use repufed_core::similarity::{lcs_len, sim, SimWeights, TrajectorySegment};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const BAD_FRACTION: f64 = 0.3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|p| p.trim().to_owned()).collect());
    let mut runs = Runs::default();
    type Criterion = (&'static str, f64, fn(&mut Runs) -> Outcome);
    let criteria: [Criterion; 11] = [
        ("subjective-logic", 5.0, |_| subjective_logic()),
        ("similarity", 10.0, |_| similarity()),
        ("dp", 10.0, |_| dp()),
        ("predictor", f64::INFINITY, |_| predictor()),
        ("gossip-dag", f64::INFINITY, |_| gossip_dag()),
        ("cost-por", f64::INFINITY, |_| cost_por()),
        ("drl", 600.0, |_| drl()),
        ("ablation", 900.0, ablation),
        ("bad-nodes", f64::INFINITY, bad_nodes),
        ("sfl-vs-afl", f64::INFINITY, sfl_vs_afl),
        ("determinism", f64::INFINITY, |_| determinism()),
    ];
    let mut passed = 0;
    let mut total = 0;
    for (name, limit, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|n| n == name)) {
            continue;
        }
        let start = Instant::now();
        let out = run(&mut runs);
        let secs = start.elapsed().as_secs_f64();
        let in_time = secs < limit;
        let pass = out.pass && in_time;
        let budget = if limit.is_finite() {
            format!(" [{secs:.1} s, limit {limit:.0} s]")
        } else {
            format!(" [{secs:.1} s]")
        };
        println!("{} {name}: {}{budget}", if pass { "PASS" } else { "FAIL" }, out.detail);
        total += 1;
        passed += pass as usize;
    }
    println!("acceptance: {passed}/{total} criteria passed");
}

// ---------------------------------------------------------------------------
// Subjective logic

fn valid(o: &Opinion) -> bool {
    o.r >= 0.0 && o.d >= 0.0 && o.u >= 0.0 && (o.r + o.d + o.u - 1.0).abs() <= 1e-9
}

fn random_opinion(rng: &mut ChaCha8Rng) -> Opinion {
    let (a, b, c): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let t = a + b + c;
    let (r, d) = (a / t, b / t);
    Opinion { r, d, u: (1.0 - r - d).max(0.0) }
}

fn subjective_logic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut bad = 0;
    let ops = 10_000;
    for k in 0..ops {
        let out = match k % 3 {
            0 => {
                let alpha = rng.random_range(0..100);
                let st = InteractionStats {
                    alpha,
                    beta: rng.random_range(if alpha == 0 { 1 } else { 0 }..100),
                    s: rng.random(),
                };
                local_opinion(&st).unwrap()
            }
            1 => {
                let recs: Vec<_> = (0..rng.random_range(1..6))
                    .map(|_| Recommendation {
                        delta: rng.random_range(0.01..1.0),
                        opinion: random_opinion(&mut rng),
                    })
                    .collect();
                combine_recommendations(&recs).unwrap()
            }
            _ => fuse_or_average(&random_opinion(&mut rng), &random_opinion(&mut rng)).unwrap(),
        };
        let r = reputation(&out, rng.random()).unwrap();
        if !valid(&out) || !(0.0..=1.0).contains(&r) {
            bad += 1;
        }
    }
    let o = local_opinion(&InteractionStats { alpha: 3, beta: 1, s: 0.8 }).unwrap();
    let r = reputation(&o, 0.5).unwrap();
    let fused = fuse_final(&Opinion::new(0.6, 0.2, 0.2).unwrap(), &Opinion::new(0.5, 0.3, 0.2).unwrap()).unwrap();
    let fr = final_reputation(&fused, 0.5).unwrap();
    let hand = (r - 0.7).abs() < 1e-12 && (fused.r - 0.6111).abs() <= 1e-4 && (fr - 0.6667).abs() <= 1e-4;
    outcome(
        bad == 0 && hand,
        format!("{bad} invalid of {ops} fuzzed ops; R={r:.4}, fused r={:.4}, R_final={fr:.4}", fused.r),
    )
}

// ---------------------------------------------------------------------------
// Similarity

fn brute_force_lcs(a: &[TrajectoryPoint], b: &[TrajectoryPoint], eps: f64) -> usize {
    let matches = |p: &TrajectoryPoint, q: &TrajectoryPoint| (p.x - q.x).hypot(p.y - q.y) <= eps;
    let mut best = 0;
    for ma in 0u32..(1 << a.len()) {
        let sa: Vec<usize> = (0..a.len()).filter(|i| ma & (1 << i) != 0).collect();
        if sa.len() <= best {
            continue;
        }
        for mb in 0u32..(1 << b.len()) {
            if mb.count_ones() as usize != sa.len() {
                continue;
            }
            let sb: Vec<usize> = (0..b.len()).filter(|i| mb & (1 << i) != 0).collect();
            if sa.iter().zip(&sb).all(|(&i, &j)| matches(&a[i], &b[j])) {
                best = sa.len();
                break;
            }
        }
    }
    best
}

fn random_points(rng: &mut ChaCha8Rng, lo: usize, hi: usize, span: f64) -> Vec<TrajectoryPoint> {
    (0..rng.random_range(lo..=hi))
        .map(|k| TrajectoryPoint::new(k as u32, rng.random_range(0.0..span), rng.random_range(0.0..span)))
        .collect()
}

fn similarity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut lcs_mismatch = 0;
    for _ in 0..200 {
        let (a, b) = (random_points(&mut rng, 1, 8, 6.0), random_points(&mut rng, 1, 8, 6.0));
        let eps = rng.random_range(0.5..3.0);
        if lcs_len(&a, &b, eps) != brute_force_lcs(&a, &b, eps) {
            lcs_mismatch += 1;
        }
    }
    let w = SimWeights::default();
    let mut prop_fail = 0;
    for _ in 0..2000 {
        let a = TrajectorySegment::new(random_points(&mut rng, 2, 10, 50.0));
        let b = TrajectorySegment::new(random_points(&mut rng, 2, 10, 50.0));
        let eps = rng.random_range(0.5..10.0);
        let ab = sim(&a, &b, &w, eps).unwrap();
        let ba = sim(&b, &a, &w, eps).unwrap();
        let aa = sim(&a, &a, &w, eps).unwrap();
        if !(0.0..=1.0).contains(&ab) || (ab - ba).abs() > 1e-12 || (aa - 1.0).abs() > 1e-12 {
            prop_fail += 1;
        }
    }
    outcome(
        lcs_mismatch == 0 && prop_fail == 0,
        format!("LCS mismatches {lcs_mismatch}/200; bound/symmetry/identity failures {prop_fail}/2000"),
    )
}

// ---------------------------------------------------------------------------
// Differential privacy

fn dp() -> Outcome {
    let cfg = DpConfig {
        epsilon: 0.5,
        sensitivity_s: 1.0,
        seed: 300,
    };
    let mut x = laplace_perturb(&vec![0.0; 100_000], &cfg).unwrap();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    x.sort_by(f64::total_cmp);
    let ks = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = laplace_cdf(v, 2.0);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    let p: Vec<f64> = (0..200).map(|i| (i as f64 - 100.0) * 1e-4).collect();
    let out = privatize(
        &p,
        &DpConfig {
            epsilon: 1e9,
            ..cfg
        },
    )
    .unwrap();
    let max_change = p.iter().zip(&out).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let var_err = (var - 8.0).abs() / 8.0;
    outcome(
        var_err < 0.05 && ks < 0.01 && max_change <= 1e-4,
        format!("variance {var:.3} ({:.2}% off 8), KS {ks:.4}, max change at eps=1e9 {max_change:.1e}", 100.0 * var_err),
    )
}

// ---------------------------------------------------------------------------
// Predictor

fn random_batch(rng: &mut ChaCha8Rng, dims: Dims) -> SceneBatch {
    let mut windows = Vec::new();
    let mut adjacency = Vec::new();
    for _ in 0..rng.random_range(1..4) {
        let n = rng.random_range(1..5);
        let history = (0..n)
            .map(|_| (0..dims.tau).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0)]).collect())
            .collect();
        let future = (0..n)
            .map(|_| (0..dims.t_f).map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)]).collect())
            .collect();
        windows.push(ObservationWindow {
            start_frame: 0,
            vehicle_ids: (0..n as u32).collect(),
            anchors: vec![[0.0, 0.0]; n],
            history,
            future,
        });
        adjacency.push(
            (0..n)
                .map(|i| {
                    let mut row: Vec<f64> = (0..n).map(|j| if i == j { 0.0 } else { rng.random() }).collect();
                    let s: f64 = row.iter().sum();
                    if s > 0.0 {
                        row.iter_mut().for_each(|v| *v /= s);
                    }
                    row
                })
                .collect(),
        );
    }
    SceneBatch::with_adjacency(windows, adjacency).unwrap()
}

fn naive_forward(p: &ModelParams, batch: &SceneBatch) -> Vec<Vec<Vec<Xy>>> {
    let (tau, t_f) = (p.dims.tau, p.dims.t_f);
    let (m, out) = (4 * tau * t_f, 2 * t_f);
    let mut preds = Vec::new();
    for (w, adj) in batch.windows.iter().zip(&batch.adjacency) {
        let n = w.n_vehicles();
        let mut wp = Vec::new();
        for i in 0..n {
            let v = [
                w.history[i][tau - 1][0] - w.history[i][tau - 2][0],
                w.history[i][tau - 1][1] - w.history[i][tau - 2][1],
            ];
            let mut d = vec![0.0; out];
            for c in 0..out {
                d[c] = p.values[2 * m + c];
                for s in 0..tau {
                    for xy in 0..2 {
                        let r = 2 * s + xy;
                        let mut g = 0.0;
                        for j in 0..n {
                            g += adj[i][j] * w.history[j][s][xy];
                        }
                        d[c] += w.history[i][s][xy] * p.values[r * out + c] + g * p.values[m + r * out + c];
                    }
                }
            }
            let mut pos = Vec::new();
            let (mut x, mut y) = (0.0, 0.0);
            for t in 0..t_f {
                x += v[0] + d[2 * t];
                y += v[1] + d[2 * t + 1];
                pos.push([x, y]);
            }
            wp.push(pos);
        }
        preds.push(wp);
    }
    preds
}

fn predictor() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let h = 1e-5;
    let mut worst_rel = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for _ in 0..20 {
        let dims = Dims::new(rng.random_range(2..5), rng.random_range(1..4)).unwrap();
        let batch = random_batch(&mut rng, dims);
        let p = ModelParams::from_values(dims, (0..dims.param_count()).map(|_| rng.random_range(-0.3..0.3)).collect())
            .unwrap();
        let g = backward(&p, &batch, &batch.truth()).unwrap();
        for _ in 0..20 {
            let k = rng.random_range(0..p.len());
            let (mut up, mut down) = (p.clone(), p.clone());
            up.values[k] += h;
            down.values[k] -= h;
            let fd = (batch_loss(&up, &batch).unwrap() - batch_loss(&down, &batch).unwrap()) / (2.0 * h);
            let scale = fd.abs().max(g.values[k].abs());
            if scale > 1e-8 {
                worst_rel = worst_rel.max((fd - g.values[k]).abs() / scale);
            }
        }
        let fast = forward(&p, &batch).unwrap();
        let slow = naive_forward(&p, &batch);
        for (a, b) in fast.iter().flatten().flatten().zip(slow.iter().flatten().flatten()) {
            worst_oracle = worst_oracle.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
        }
    }
    let tracks = (0..4)
        .map(|v| {
            let (vx, vy) = (v as f64 + 1.0, (v % 2) as f64);
            let pts = (0..30)
                .map(|t| TrajectoryPoint::new(t, 5.0 * v as f64 + vx * t as f64, 3.0 * v as f64 + vy * t as f64))
                .collect();
            Track::new(v as u32 + 1, pts).unwrap()
        })
        .collect();
    let scene = Scene::new(tracks, 10.0).unwrap();
    let dims = Dims::new(4, 6).unwrap();
    let batch = SceneBatch::new(window(&scene, 4, 6, 1).unwrap(), &Default::default()).unwrap();
    let pred: Vec<Vec<Xy>> = forward(&ModelParams::zeros(dims), &batch).unwrap().into_iter().flatten().collect();
    let truth: Vec<Vec<Xy>> = batch.truth().into_iter().flatten().collect();
    let cv_ade = metrics(&pred, &truth).unwrap().ade;
    outcome(
        worst_rel < 1e-5 && worst_oracle <= 1e-12 && cv_ade == 0.0,
        format!("max FD rel err {worst_rel:.2e}; max naive-oracle diff {worst_oracle:.1e}; CV ADE {cv_ade}"),
    )
}

// ---------------------------------------------------------------------------
// Gossip / DAG

fn gossip_dag() -> Outcome {
    let seeded = |n: usize| -> Vec<LocalDag> {
        (0..n)
            .map(|i| {
                let mut d = LocalDag::new();
                for k in 0..2 {
                    d.append(TxKind::ModelShare, format!("v{i}-{k}"), i as u32, k).unwrap();
                }
                d
            })
            .collect()
    };
    let dags = seeded(6);
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut reference: Option<LocalDag> = None;
    let mut merge_fail = 0;
    for _ in 0..100 {
        let mut order: Vec<usize> = (0..dags.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut acc = LocalDag::new();
        let mut k = 0;
        while k < order.len() {
            if k + 1 < order.len() && rng.random_bool(0.5) {
                let mut pair = dags[order[k]].clone();
                pair.merge(&dags[order[k + 1]]);
                acc.merge(&pair);
                k += 2;
            } else {
                acc.merge(&dags[order[k]]);
                k += 1;
            }
        }
        let mut twice = acc.clone();
        twice.merge(&acc);
        if twice != acc {
            merge_fail += 1;
        }
        match &reference {
            None => reference = Some(acc),
            Some(r) if *r != acc => merge_fail += 1,
            _ => {}
        }
    }
    let topo = Topology::ring(8);
    let mut rounds = Vec::new();
    for seed in 0..100u64 {
        let mut d = seeded(8);
        let mut hit = None;
        for round in 1..=16u64 {
            d = gossip_round(&d, &topo, 1, seed * 1000 + round).unwrap();
            if consistent(&d) {
                hit = Some(round);
                break;
            }
        }
        rounds.push(hit);
    }
    let converged = rounds.iter().filter(|r| r.is_some()).count();
    let worst = rounds.iter().flatten().max().copied().unwrap_or(0);
    outcome(
        merge_fail == 0 && converged == 100,
        format!("merge order/idempotence failures {merge_fail}/100; ring-of-8 converged {converged}/100 seeds, worst {worst} rounds"),
    )
}

// ---------------------------------------------------------------------------
// Cost / PoR

fn cost_por() -> Outcome {
    let gamma = por_weight(100.0, 400.0).unwrap();
    let node = NodeResources {
        data_size: 1000.0,
        xi: 500.0,
        tau_rate: 50.0,
        model_size: 100.0,
    };
    let c = slot_costs(&[0, 1], &[node, node], &[1.0, 1.0], 2.0, RolForm::Surrogate).unwrap();
    outcome(
        gamma == 1.25 && c.c_a == 4.0 && c.c_u == 2.0 && c.c_te == 6.0,
        format!("gamma_j={gamma}, C_a={} s, C_u={} s, C_te={} s", c.c_a, c.c_u, c.c_te),
    )
}

// ---------------------------------------------------------------------------
// DRL

fn drl() -> Outcome {
    let cfg = EnvConfig::default();
    let mut lines = Vec::new();
    let (mut ok_ppo, mut ppo_faster) = (0, 0);
    for seed in [1u64, 2, 3] {
        let world = SelectWorld::synthetic(20, seed);
        let oracle = greedy_oracle_reward(&cfg, &world, (0..100).map(|e| episode_seed(seed, e))).unwrap();
        let random = random_policy_reward(&cfg, &world, 200, seed).unwrap();
        let ppo = ppo_train(&cfg, &world, &PpoHyper::default(), seed).unwrap();
        let dqn = dqn_train(&cfg, &world, &DqnHyper::default(), seed).unwrap();
        let tail = tail_mean(&ppo.curve, 100);
        let to80 = |c| episodes_to_reach(c, 0.8 * oracle, 20).unwrap_or(usize::MAX);
        let (p80, d80) = (to80(&ppo.curve), to80(&dqn.curve));
        if tail >= 0.9 * oracle && tail > random {
            ok_ppo += 1;
        }
        if p80 < d80 {
            ppo_faster += 1;
        }
        let show = |e: usize| if e == usize::MAX { "never".to_owned() } else { e.to_string() };
        lines.push(format!(
            "seed {seed}: PPO tail {tail:.2} vs oracle {oracle:.2} / random {random:.2}, DQN tail {:.2}, 80% at PPO {} / DQN {}",
            tail_mean(&dqn.curve, 100),
            show(p80),
            show(d80)
        ));
    }
    outcome(
        ok_ppo == 3 && ppo_faster >= 2,
        format!("PPO >= 90% oracle and > random on {ok_ppo}/3; PPO reaches 80% first on {ppo_faster}/3 ({})", lines.join("; ")),
    )
}

// ---------------------------------------------------------------------------
// Federation-level criteria share their runs.

#[derive(Default)]
struct Runs {
    cache: BTreeMap<(String, u64), (f64, Vec<RoundReport>)>,
}

/// Standard scenario with 30 slots.
fn scenario(seed: u64, bad_fraction: f64, dp: bool) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::standard(seed);
    cfg.slots = 30;
    cfg.fl.bad_fraction = bad_fraction;
    cfg.dp.enabled = dp;
    cfg
}

impl Runs {
    /// (initial ADE, per-slot reports) of one run, memoized.
    fn get(&mut self, mode: Mode, seed: u64, bad_fraction: f64, dp: bool) -> &(f64, Vec<RoundReport>) {
        // With DP disabled, the no-dp mode and afl coincide; share the run.
        let (mode, dp) = if mode == Mode::NoDp { (Mode::Afl, false) } else { (mode, dp) };
        let key = (format!("{mode:?}/{bad_fraction}/{dp}"), seed);
        self.cache.entry(key).or_insert_with(|| {
            let out = simulate(&scenario(seed, bad_fraction, dp), mode, seed).unwrap();
            (out.summary.initial_ade, out.reports)
        })
    }

    fn final_ade(&mut self, mode: Mode, seed: u64, bad_fraction: f64, dp: bool) -> f64 {
        self.get(mode, seed, bad_fraction, dp).1.last().unwrap().metrics.ade
    }
}

fn ablation(runs: &mut Runs) -> Outcome {
    let mut ade: BTreeMap<Variant, Vec<f64>> = BTreeMap::new();
    for seed in SEEDS {
        for v in Variant::ALL {
            let a = runs.final_ade(v.mode(), seed, BAD_FRACTION, true);
            ade.entry(v).or_default().push(a);
        }
    }
    let base = ade[&Variant::Base].clone();
    let mut pass = true;
    let mut parts = Vec::new();
    for v in [Variant::NoDrl, Variant::NoDp, Variant::NoAfl, Variant::LowR] {
        let wins = base.iter().zip(&ade[&v]).filter(|(b, o)| b < o).count();
        let mean = ade[&v].iter().sum::<f64>() / SEEDS.len() as f64;
        pass &= wins >= 4;
        parts.push(format!("base < {v} on {wins}/5 (mean {mean:.4})"));
    }
    let mean_base = base.iter().sum::<f64>() / SEEDS.len() as f64;
    outcome(pass, format!("base mean ADE {mean_base:.4}; {}", parts.join(", ")))
}

fn bad_nodes(runs: &mut Runs) -> Outcome {
    let mut gaps_on = Vec::new();
    let mut gaps_off = Vec::new();
    let (mut on0, mut on30) = (0.0, 0.0);
    for seed in SEEDS {
        let (a0, a30) = (runs.final_ade(Mode::Afl, seed, 0.0, true), runs.final_ade(Mode::Afl, seed, BAD_FRACTION, true));
        let (b0, b30) = (runs.final_ade(Mode::NoDp, seed, 0.0, true), runs.final_ade(Mode::NoDp, seed, BAD_FRACTION, true));
        on0 += a0;
        on30 += a30;
        gaps_on.push((a30 - a0) / a0);
        gaps_off.push((b30 - b0) / b0);
    }
    let mean_gap = (on30 - on0) / on0;
    let larger = gaps_on.iter().zip(&gaps_off).filter(|(on, off)| off > on).count();
    let fmt = |g: &[f64]| g.iter().map(|x| format!("{:+.1}%", 100.0 * x)).collect::<Vec<_>>().join(" ");
    outcome(
        mean_gap <= 0.25 && larger >= 4,
        format!(
            "DP on: mean ADE gap {:+.1}% (per seed {}); DP off per seed {}; off gap larger on {larger}/5",
            100.0 * mean_gap,
            fmt(&gaps_on),
            fmt(&gaps_off)
        ),
    )
}

fn sfl_vs_afl(runs: &mut Runs) -> Outcome {
    // DP is off here: with it on, no candidate passes validation and neither
    // mode ever moves off the initial ADE.
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let (initial, afl) = runs.get(Mode::Afl, seed, BAD_FRACTION, false).clone();
        let target = 0.97 * initial;
        let t_afl = time_to_target(&afl, target);
        let t_sfl = time_to_target(&runs.get(Mode::Sfl, seed, BAD_FRACTION, false).1, target);
        let afl_first = match (t_afl, t_sfl) {
            (Some(a), Some(s)) => a < s,
            (Some(_), None) => true,
            _ => false,
        };
        wins += afl_first as usize;
        let show = |t: Option<f64>| t.map_or("never".to_owned(), |t| format!("{t:.1}"));
        parts.push(format!("seed {seed}: AFL {} / SFL {}", show(t_afl), show(t_sfl)));
    }
    outcome(
        wins >= 4,
        format!("AFL reaches 97% of initial ADE first on {wins}/5, DP off ({})", parts.join("; ")),
    )
}

// ---------------------------------------------------------------------------
// Determinism

fn digest_dir(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let bytes = std::fs::read(&path).unwrap();
        let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), hex);
    }
    out
}

fn determinism() -> Outcome {
    let mut cfg = ScenarioConfig::standard(21);
    cfg.slots = 5;
    cfg.fl.bad_fraction = BAD_FRACTION;
    cfg.drl.ppo.episodes = 60;
    cfg.drl.dqn.episodes = 60;
    let spec = SweepSpec {
        param: "dp.epsilon".into(),
        values: vec![0.3, 1.0],
        repeats: 1,
    };
    let produce = |dir: &Path| {
        cmd_run(&cfg, dir).unwrap();
        cmd_ablate(&cfg, &[Variant::Base, Variant::LowR], dir).unwrap();
        cmd_sweep(&cfg, &spec, dir).unwrap();
        cmd_drl(&cfg, TrainAlgo::Ppo, dir).unwrap();
        cmd_drl(&cfg, TrainAlgo::Dqn, dir).unwrap();
        digest_dir(dir)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (da, db) = (produce(a.path()), produce(b.path()));
    let same = da.iter().filter(|(k, v)| db.get(*k) == Some(v)).count();
    outcome(
        da == db && da.len() == 9,
        format!("{same}/{} output files byte-identical across re-runs (run, ablate, sweep, drl)", da.len()),
    )
}
