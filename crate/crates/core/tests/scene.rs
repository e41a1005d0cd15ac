use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repufed_core::scene::{
    inject_bad_nodes, metrics, parse_csv, synthesize_traffic, to_csv_string, window, CorruptionMode, CsvFormat, Scene,
    SynthConfig, Track, TrajectoryPoint, Xy,
};

fn fmt() -> CsvFormat {
    CsvFormat::NgsimLike { frame_rate: 5.0 }
}

#[test]
fn thousand_row_synthetic_dump_round_trips() {
    let scene = synthesize_traffic(&SynthConfig {
        n_vehicles: 10,
        duration_frames: 100,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let rows: usize = scene.tracks.iter().map(|t| t.points.len()).sum();
    assert_eq!(rows, 1000);
    let back = parse_csv(&to_csv_string(std::slice::from_ref(&scene)), fmt()).unwrap();
    assert_eq!(back.len(), 1);
    assert_eq!(back[0].tracks.len(), scene.tracks.len());
    for (a, b) in back[0].tracks.iter().zip(&scene.tracks) {
        assert_eq!(a.vehicle_id, b.vehicle_id);
        assert_eq!(a.points, b.points);
    }
}

/// Every track covers frame 4, so the frames form one contiguous block
/// and load back as a single scene.
prop_compose! {
    fn random_scene()(seed in any::<u64>(), n in 1usize..6, len in 5u32..20) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tracks = (0..n)
            .map(|v| {
                let start = rng.random_range(0..5);
                let pts = (start..start + len)
                    .map(|t| TrajectoryPoint::new(t, rng.random_range(-1e4..1e4), rng.random_range(-50.0..50.0)))
                    .collect();
                Track::new(v as u32 * 7 + 1, pts).unwrap()
            })
            .collect();
        Scene::new(tracks, 5.0).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn csv_round_trip_is_bit_exact(scene in random_scene()) {
        let back = parse_csv(&to_csv_string(std::slice::from_ref(&scene)), fmt()).unwrap();
        prop_assert_eq!(back.len(), 1);
        for (a, b) in back[0].tracks.iter().zip(&scene.tracks) {
            prop_assert_eq!(a.vehicle_id, b.vehicle_id);
            for (p, q) in a.points.iter().zip(&b.points) {
                prop_assert_eq!((p.t, p.x.to_bits(), p.y.to_bits()), (q.t, q.x.to_bits(), q.y.to_bits()));
            }
        }
    }
}

#[test]
fn unit_velocity_window_hand_case() {
    let track = Track::new(1, (0..5).map(|t| TrajectoryPoint::new(t, t as f64, 0.0)).collect()).unwrap();
    let scene = Scene::new(vec![track], 10.0).unwrap();
    let w = window(&scene, 3, 2, 1).unwrap();
    assert_eq!(w.len(), 1);
    assert_eq!(w[0].history[0], vec![[-2.0, 0.0], [-1.0, 0.0], [0.0, 0.0]]);
    assert_eq!(w[0].future[0], vec![[1.0, 0.0], [2.0, 0.0]]);
    assert_eq!(w[0].anchors[0], [2.0, 0.0]);
}

#[test]
fn ten_frames_give_three_windows() {
    let track = Track::new(1, (0..10).map(|t| TrajectoryPoint::new(t, 0.0, 0.0)).collect()).unwrap();
    let scene = Scene::new(vec![track], 10.0).unwrap();
    assert_eq!(window(&scene, 3, 5, 1).unwrap().len(), 3);
}

fn naive_metrics(pred: &[Vec<Xy>], truth: &[Vec<Xy>]) -> (f64, f64, f64) {
    let (mut ade, mut n, mut fde, mut sq) = (0.0, 0.0, 0.0, 0.0);
    for v in 0..pred.len() {
        let steps = pred[v].len();
        for t in 0..steps {
            let dx = pred[v][t][0] - truth[v][t][0];
            let dy = pred[v][t][1] - truth[v][t][1];
            ade += (dx * dx + dy * dy).sqrt();
            sq += dx * dx + dy * dy;
            n += 1.0;
        }
        let dx = pred[v][steps - 1][0] - truth[v][steps - 1][0];
        let dy = pred[v][steps - 1][1] - truth[v][steps - 1][1];
        fde += (dx * dx + dy * dy).sqrt();
    }
    (ade / n, fde / pred.len() as f64, (sq / (2.0 * n)).sqrt())
}

#[test]
fn metrics_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let (nv, ns) = (rng.random_range(1..6), rng.random_range(1..8));
        let mut gen = || -> Vec<Vec<Xy>> {
            (0..nv)
                .map(|_| (0..ns).map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)]).collect())
                .collect()
        };
        let (p, t) = (gen(), gen());
        let m = metrics(&p, &t).unwrap();
        let (ade, fde, rmse) = naive_metrics(&p, &t);
        assert!((m.ade - ade).abs() < 1e-12 && (m.fde - fde).abs() < 1e-12 && (m.rmse - rmse).abs() < 1e-12);
        assert_eq!(metrics(&t, &p).unwrap(), m);
    }
    let truth = vec![vec![[0.0, 0.0]; 3]];
    let off = vec![vec![[3.0, 4.0]; 3]];
    let m = metrics(&off, &truth).unwrap();
    assert_eq!((m.ade, m.fde), (5.0, 5.0));
    assert!(metrics(&off, &[]).is_err());
}

#[test]
fn bad_node_injection_counts_and_changes_tracks() {
    let scene = synthesize_traffic(&SynthConfig {
        n_vehicles: 10,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let (clean, none) = inject_bad_nodes(&scene, 0.0, CorruptionMode::Jitter, 5.0, 1).unwrap();
    assert!(none.is_empty());
    assert_eq!(clean, scene);
    let (_, all) = inject_bad_nodes(&scene, 1.0, CorruptionMode::Jitter, 5.0, 1).unwrap();
    assert_eq!(all.len(), 10);
    for mode in [CorruptionMode::Jitter, CorruptionMode::Scale, CorruptionMode::Swap] {
        let (bad_scene, bad) = inject_bad_nodes(&scene, 0.3, mode, 5.0, 2).unwrap();
        assert_eq!(bad.len(), 3);
        assert_eq!(bad_scene.bad_ids(), bad);
        for (a, b) in bad_scene.tracks.iter().zip(&scene.tracks) {
            assert_eq!(a.points != b.points, bad.contains(&a.vehicle_id), "{mode:?}");
        }
    }
    assert!(inject_bad_nodes(&scene, 1.5, CorruptionMode::Jitter, 5.0, 1).is_err());
}

#[test]
fn synthetic_traffic_respects_lanes_and_speeds() {
    let cfg = SynthConfig {
        seed: 6,
        position_noise: 0.0,
        ..SynthConfig::default()
    };
    let scene = synthesize_traffic(&cfg).unwrap();
    assert_eq!(scene.tracks.len(), 20);
    let road = cfg.n_lanes as f64 * cfg.lane_width;
    for tr in &scene.tracks {
        assert_eq!(tr.points.len(), cfg.duration_frames as usize);
        for w in tr.points.windows(2) {
            assert!((0.0..=road).contains(&w[1].y));
            let dx = (w[1].x - w[0].x) * cfg.frame_rate;
            assert!(dx >= cfg.speed_range.0 - 1e-9 && dx <= cfg.speed_range.1 + 1e-9, "speed {dx}");
        }
    }
}
