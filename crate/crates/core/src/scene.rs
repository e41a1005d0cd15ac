//! Trajectory scenes: CSV ingestion, synthetic traffic, observation windows,
//! bad-node corruption and displacement metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

/// A 2-D position in meters, paired as `[x, y]`.
pub type Xy = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: u32,
    pub x: f64,
    pub y: f64,
}

impl TrajectoryPoint {
    pub fn new(t: u32, x: f64, y: f64) -> Self {
        Self { t, x, y }
    }

    pub fn xy(&self) -> Xy {
        [self.x, self.y]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub vehicle_id: u32,
    pub points: Vec<TrajectoryPoint>,
    /// Ground truth for simulations; never read by the learning pipeline.
    pub is_bad: bool,
}

impl Track {
    pub fn new(vehicle_id: u32, points: Vec<TrajectoryPoint>) -> Result<Self> {
        let track = Self {
            vehicle_id,
            points,
            is_bad: false,
        };
        track.validate()?;
        Ok(track)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            invalid!("track {} has {} points, need at least 2", self.vehicle_id, self.points.len());
        }
        for w in self.points.windows(2) {
            if w[1].t <= w[0].t {
                invalid!(
                    "track {}: frame {} follows frame {} (frames must strictly increase)",
                    self.vehicle_id,
                    w[1].t,
                    w[0].t
                );
            }
        }
        Ok(())
    }

    pub fn first_frame(&self) -> u32 {
        self.points[0].t
    }

    pub fn last_frame(&self) -> u32 {
        self.points[self.points.len() - 1].t
    }

    /// Position at frame `t`, if the track was observed there.
    pub fn at(&self, t: u32) -> Option<&TrajectoryPoint> {
        self.points
            .binary_search_by_key(&t, |p| p.t)
            .ok()
            .map(|i| &self.points[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub tracks: Vec<Track>,
    pub frame_rate: f64,
}

impl Scene {
    pub fn new(mut tracks: Vec<Track>, frame_rate: f64) -> Result<Self> {
        tracks.sort_by_key(|t| t.vehicle_id);
        let scene = Self { tracks, frame_rate };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            invalid!("frame rate must be positive, got {}", self.frame_rate);
        }
        let mut seen = BTreeSet::new();
        for track in &self.tracks {
            track.validate()?;
            if !seen.insert(track.vehicle_id) {
                invalid!("duplicate vehicle id {}", track.vehicle_id);
            }
        }
        Ok(())
    }

    /// Inclusive frame range covered by any track.
    pub fn frame_range(&self) -> Option<(u32, u32)> {
        let lo = self.tracks.iter().map(Track::first_frame).min()?;
        let hi = self.tracks.iter().map(Track::last_frame).max()?;
        Some((lo, hi))
    }

    pub fn len_frames(&self) -> usize {
        self.frame_range()
            .map(|(lo, hi)| (hi - lo) as usize + 1)
            .unwrap_or(0)
    }

    pub fn track(&self, vehicle_id: u32) -> Option<&Track> {
        self.tracks
            .binary_search_by_key(&vehicle_id, |t| t.vehicle_id)
            .ok()
            .map(|i| &self.tracks[i])
    }

    /// Sub-scene holding frames in `[from, to)`; tracks left with fewer than
    /// two points are dropped.
    pub fn slice_frames(&self, from: u32, to: u32) -> Scene {
        let tracks = self
            .tracks
            .iter()
            .filter_map(|t| {
                let points: Vec<TrajectoryPoint> = t.points.iter().filter(|p| p.t >= from && p.t < to).copied().collect();
                (points.len() >= 2).then(|| Track {
                    vehicle_id: t.vehicle_id,
                    points,
                    is_bad: t.is_bad,
                })
            })
            .collect();
        Scene {
            tracks,
            frame_rate: self.frame_rate,
        }
    }

    pub fn bad_ids(&self) -> BTreeSet<u32> {
        self.tracks
            .iter()
            .filter(|t| t.is_bad)
            .map(|t| t.vehicle_id)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// CSV

/// On-disk layouts understood by [`load_csv`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CsvFormat {
    /// `frame_id,vehicle_id,x,y[,lane_id]` with positions in meters.
    NgsimLike { frame_rate: f64 },
}

impl Default for CsvFormat {
    fn default() -> Self {
        CsvFormat::NgsimLike { frame_rate: 10.0 }
    }
}

const CSV_HEADER: &str = "frame_id,vehicle_id,x,y";

pub fn load_csv(path: impl AsRef<Path>, format: CsvFormat) -> Result<Vec<Scene>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, format)
}

pub fn parse_csv(text: &str, format: CsvFormat) -> Result<Vec<Scene>> {
    let CsvFormat::NgsimLike { frame_rate } = format;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing header row".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let col = |name: &str| -> Result<usize> {
        cols.iter().position(|c| *c == name).ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("header lacks column `{name}`"),
        })
    };
    let (c_frame, c_vid, c_x, c_y) = (col("frame_id")?, col("vehicle_id")?, col("x")?, col("y")?);

    // (vehicle, frame) -> (x, y); BTreeMap makes the result independent of row order.
    let mut rows: BTreeMap<(u32, u32), (f64, f64, usize)> = BTreeMap::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        let parse_err = |what: &str, raw: &str| Error::Parse {
            line: line_no,
            msg: format!("bad {what} `{raw}`"),
        };
        let frame: u32 = fields[c_frame].parse().map_err(|_| parse_err("frame_id", fields[c_frame]))?;
        let vid: u32 = fields[c_vid].parse().map_err(|_| parse_err("vehicle_id", fields[c_vid]))?;
        let x: f64 = fields[c_x].parse().map_err(|_| parse_err("x", fields[c_x]))?;
        let y: f64 = fields[c_y].parse().map_err(|_| parse_err("y", fields[c_y]))?;
        if !x.is_finite() || !y.is_finite() {
            return Err(parse_err("coordinate", line));
        }
        if let Some((_, _, first)) = rows.insert((vid, frame), (x, y, line_no)) {
            invalid!(
                "vehicle {vid} has two rows for frame {frame} (lines {first} and {line_no})"
            );
        }
    }

    // Contiguous frame blocks: a gap in the set of observed frames starts a new scene.
    let frames: BTreeSet<u32> = rows.keys().map(|&(_, f)| f).collect();
    let mut blocks: Vec<(u32, u32)> = Vec::new();
    for &f in &frames {
        match blocks.last_mut() {
            Some((_, hi)) if *hi + 1 == f => *hi = f,
            _ => blocks.push((f, f)),
        }
    }

    let mut scenes = Vec::with_capacity(blocks.len());
    for (lo, hi) in blocks {
        let mut per_vehicle: BTreeMap<u32, Vec<TrajectoryPoint>> = BTreeMap::new();
        for (&(vid, frame), &(x, y, _)) in rows.iter() {
            if (lo..=hi).contains(&frame) {
                per_vehicle
                    .entry(vid)
                    .or_default()
                    .push(TrajectoryPoint::new(frame, x, y));
            }
        }
        let mut tracks = Vec::new();
        for (vid, points) in per_vehicle {
            if points.len() < 2 {
                log::debug!("dropping vehicle {vid} in frames {lo}..={hi}: single observation");
                continue;
            }
            tracks.push(Track::new(vid, points)?);
        }
        if !tracks.is_empty() {
            scenes.push(Scene::new(tracks, frame_rate)?);
        }
    }
    Ok(scenes)
}

/// Serialise scenes to the CSV layout read by [`load_csv`].
///
/// Coordinates are written in shortest round-trip form, so reloading yields
/// bit-identical values.
pub fn to_csv_string(scenes: &[Scene]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for scene in scenes {
        let mut rows: Vec<(u32, u32, f64, f64)> = scene
            .tracks
            .iter()
            .flat_map(|tr| tr.points.iter().map(move |p| (p.t, tr.vehicle_id, p.x, p.y)))
            .collect();
        rows.sort_by_key(|r| (r.0, r.1));
        for (f, v, x, y) in rows {
            let _ = writeln!(out, "{f},{v},{x:?},{y:?}");
        }
    }
    out
}

pub fn save_csv(scenes: &[Scene], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv_string(scenes)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Synthetic traffic

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_vehicles: usize,
    pub n_lanes: usize,
    pub lane_width: f64,
    pub duration_frames: usize,
    pub frame_rate: f64,
    /// Longitudinal speed bounds in m/s.
    pub speed_range: (f64, f64),
    /// Per-frame probability that a vehicle starts a lane change.
    pub lane_change_prob: f64,
    /// Per-frame probability that a vehicle picks a new target speed.
    pub speed_change_prob: f64,
    /// Seconds taken by a lane change or a speed transition.
    pub maneuver_seconds: f64,
    /// Standard deviation of i.i.d. Gaussian sensor noise on every recorded
    /// coordinate, meters.
    pub position_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_vehicles: 20,
            n_lanes: 3,
            lane_width: 3.7,
            duration_frames: 200,
            frame_rate: 5.0,
            speed_range: (8.0, 16.0),
            lane_change_prob: 0.02,
            speed_change_prob: 0.05,
            maneuver_seconds: 3.0,
            position_noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn lane_center(&self, lane: usize) -> f64 {
        (lane as f64 + 0.5) * self.lane_width
    }
}

/// Kinematic lane-following traffic on a straight multi-lane road.
///
/// Every vehicle is present for the whole duration. Lane changes follow a
/// raised-cosine lateral profile; speed changes ramp linearly to a new target
/// inside `speed_range`, so longitudinal speed never leaves the range.
pub fn synthesize_traffic(cfg: &SynthConfig) -> Result<Scene> {
    if cfg.duration_frames == 0 {
        invalid!("duration_frames must be positive");
    }
    if cfg.duration_frames < 2 {
        invalid!("duration_frames must be at least 2 to form tracks");
    }
    if cfg.n_vehicles == 0 || cfg.n_lanes == 0 {
        invalid!("need at least one vehicle and one lane");
    }
    let (vmin, vmax) = cfg.speed_range;
    if !(vmin > 0.0 && vmax >= vmin) {
        invalid!("speed_range must be positive and ordered, got ({vmin}, {vmax})");
    }
    if !(cfg.frame_rate > 0.0) || !(cfg.lane_width > 0.0) {
        invalid!("frame_rate and lane_width must be positive");
    }
    let noise = Normal::new(0.0, cfg.position_noise)
        .map_err(|e| Error::Validation(format!("position_noise: {e}")))?;
    let mut noise_rng = rng::substream(cfg.seed, "synth-noise", &[]);
    let dt = 1.0 / cfg.frame_rate;
    let ramp = ((cfg.maneuver_seconds * cfg.frame_rate).round() as usize).max(1);
    let mut rng = rng::substream(cfg.seed, "synth", &[]);
    let spacing = 25.0;

    let mut tracks = Vec::with_capacity(cfg.n_vehicles);
    for v in 0..cfg.n_vehicles {
        let mut lane = v % cfg.n_lanes;
        let mut x = (v / cfg.n_lanes) as f64 * spacing + rng.random_range(0.0..spacing * 0.5);
        let mut y = cfg.lane_center(lane);
        let mut speed = if vmax > vmin { rng.random_range(vmin..=vmax) } else { vmin };

        // Active manoeuvres: (frames elapsed, total frames, start, end).
        let mut lateral: Option<(usize, f64, f64)> = None;
        let mut longitudinal: Option<(usize, f64, f64)> = None;

        let mut points = Vec::with_capacity(cfg.duration_frames);
        for f in 0..cfg.duration_frames {
            if cfg.position_noise > 0.0 {
                let (nx, ny) = (noise.sample(&mut noise_rng), noise.sample(&mut noise_rng));
                points.push(TrajectoryPoint::new(f as u32, x + nx, y + ny));
            } else {
                points.push(TrajectoryPoint::new(f as u32, x, y));
            }

            if lateral.is_none() && cfg.n_lanes > 1 && rng.random::<f64>() < cfg.lane_change_prob {
                let target = if lane == 0 {
                    1
                } else if lane + 1 == cfg.n_lanes || rng.random::<bool>() {
                    lane - 1
                } else {
                    lane + 1
                };
                lateral = Some((0, cfg.lane_center(lane), cfg.lane_center(target)));
                lane = target;
            }
            if longitudinal.is_none() && vmax > vmin && rng.random::<f64>() < cfg.speed_change_prob {
                longitudinal = Some((0, speed, rng.random_range(vmin..=vmax)));
            }

            if let Some((k, from, to)) = longitudinal.as_mut() {
                *k += 1;
                let p = *k as f64 / ramp as f64;
                speed = *from + (*to - *from) * p;
                if *k >= ramp {
                    speed = *to;
                    longitudinal = None;
                }
            }
            if let Some((k, from, to)) = lateral.as_mut() {
                *k += 1;
                let p = *k as f64 / ramp as f64;
                y = *from + (*to - *from) * 0.5 * (1.0 - (std::f64::consts::PI * p).cos());
                if *k >= ramp {
                    y = *to;
                    lateral = None;
                }
            }
            x += speed * dt;
        }
        tracks.push(Track::new(v as u32 + 1, points)?);
    }
    Scene::new(tracks, cfg.frame_rate)
}

// ---------------------------------------------------------------------------
// Windows

/// One observation window: `history` and `future` are relative to each
/// vehicle's position at the last history frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationWindow {
    pub start_frame: u32,
    pub vehicle_ids: Vec<u32>,
    /// Absolute position at the last history frame, per vehicle.
    pub anchors: Vec<Xy>,
    /// `history[i]` has τ rows; the last one is `(0, 0)`.
    pub history: Vec<Vec<Xy>>,
    /// `future[i]` has T_f rows.
    pub future: Vec<Vec<Xy>>,
}

impl ObservationWindow {
    pub fn n_vehicles(&self) -> usize {
        self.vehicle_ids.len()
    }

    pub fn history_len(&self) -> usize {
        self.history.first().map_or(0, Vec::len)
    }

    pub fn future_len(&self) -> usize {
        self.future.first().map_or(0, Vec::len)
    }

    /// Absolute history positions of vehicle `i`.
    pub fn absolute_history(&self, i: usize) -> Vec<Xy> {
        let [ax, ay] = self.anchors[i];
        self.history[i].iter().map(|[x, y]| [x + ax, y + ay]).collect()
    }

    /// Keep only the listed vehicle indices, in the given order.
    pub fn select(&self, idx: &[usize]) -> ObservationWindow {
        ObservationWindow {
            start_frame: self.start_frame,
            vehicle_ids: idx.iter().map(|&i| self.vehicle_ids[i]).collect(),
            anchors: idx.iter().map(|&i| self.anchors[i]).collect(),
            history: idx.iter().map(|&i| self.history[i].clone()).collect(),
            future: idx.iter().map(|&i| self.future[i].clone()).collect(),
        }
    }
}

pub fn window(scene: &Scene, tau: usize, t_f: usize, stride: usize) -> Result<Vec<ObservationWindow>> {
    if tau < 2 {
        invalid!("history length must be at least 2, got {tau}");
    }
    if t_f < 1 {
        invalid!("future length must be at least 1");
    }
    if stride < 1 {
        invalid!("stride must be at least 1");
    }
    let Some((lo, hi)) = scene.frame_range() else {
        return Ok(Vec::new());
    };
    let span = tau + t_f;
    let len = (hi - lo) as usize + 1;
    if span > len {
        invalid!("window of {span} frames exceeds scene length {len}");
    }

    let mut out = Vec::new();
    let mut start = lo as usize;
    while start + span - 1 <= hi as usize {
        let mut w = ObservationWindow {
            start_frame: start as u32,
            vehicle_ids: Vec::new(),
            anchors: Vec::new(),
            history: Vec::new(),
            future: Vec::new(),
        };
        for track in &scene.tracks {
            let pts: Option<Vec<&TrajectoryPoint>> = (start..start + span)
                .map(|f| track.at(f as u32))
                .collect();
            let Some(pts) = pts else { continue };
            let anchor = pts[tau - 1].xy();
            let rel = |p: &TrajectoryPoint| [p.x - anchor[0], p.y - anchor[1]];
            w.vehicle_ids.push(track.vehicle_id);
            w.anchors.push(anchor);
            let mut hist: Vec<Xy> = pts[..tau].iter().map(|p| rel(p)).collect();
            hist[tau - 1] = [0.0, 0.0];
            w.history.push(hist);
            w.future.push(pts[tau..].iter().map(|p| rel(p)).collect());
        }
        if !w.vehicle_ids.is_empty() {
            out.push(w);
        }
        start += stride;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Bad nodes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    /// Scale each track's displacement from its first point by `magnitude`.
    Scale,
    /// Add i.i.d. Gaussian noise with σ = `magnitude` meters to every coordinate.
    Jitter,
    /// Replace the track's motion with another vehicle's motion, re-anchored
    /// at the victim's first point. `magnitude` is unused.
    Swap,
}

pub fn inject_bad_nodes(
    scene: &Scene,
    fraction: f64,
    mode: CorruptionMode,
    magnitude: f64,
    seed: u64,
) -> Result<(Scene, BTreeSet<u32>)> {
    if !(0.0..=1.0).contains(&fraction) {
        invalid!("bad-node fraction must lie in [0, 1], got {fraction}");
    }
    let n = scene.tracks.len();
    let n_bad = (fraction * n as f64 + 1e-9).floor() as usize;
    let mut rng = rng::substream(seed, "bad-nodes", &[]);
    let mut chosen: Vec<usize> = sample(&mut rng, n, n_bad.min(n)).into_vec();
    chosen.sort_unstable();

    let mut out = scene.clone();
    let mut bad = BTreeSet::new();
    for &i in &chosen {
        let original = &scene.tracks[i];
        let track = &mut out.tracks[i];
        track.is_bad = true;
        bad.insert(track.vehicle_id);
        let origin = original.points[0];
        match mode {
            CorruptionMode::Scale => {
                for p in &mut track.points {
                    p.x = origin.x + magnitude * (p.x - origin.x);
                    p.y = origin.y + magnitude * (p.y - origin.y);
                }
            }
            CorruptionMode::Jitter => {
                let normal = Normal::new(0.0, magnitude.abs())
                    .map_err(|e| Error::Validation(format!("jitter magnitude: {e}")))?;
                for p in &mut track.points {
                    p.x += normal.sample(&mut rng);
                    p.y += normal.sample(&mut rng);
                }
            }
            CorruptionMode::Swap => {
                if n < 2 {
                    continue;
                }
                let mut donor = rng.random_range(0..n - 1);
                if donor >= i {
                    donor += 1;
                }
                let donor = &scene.tracks[donor];
                let d0 = donor.points[0];
                for p in &mut track.points {
                    if let Some(q) = donor.at(p.t) {
                        p.x = origin.x + (q.x - d0.x);
                        p.y = origin.y + (q.y - d0.y);
                    }
                }
            }
        }
    }
    Ok((out, bad))
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub ade: f64,
    pub fde: f64,
    pub rmse: f64,
}

/// Displacement metrics for predictions laid out `[vehicle][step]`.
pub fn metrics(pred: &[Vec<Xy>], truth: &[Vec<Xy>]) -> Result<Metrics> {
    MetricsAccumulator::default().add(pred, truth).map(|acc| acc.finish())
}

/// Streams ADE/FDE/RMSE over several windows.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    disp_sum: f64,
    disp_count: usize,
    final_sum: f64,
    final_count: usize,
    sq_sum: f64,
    coord_count: usize,
}

impl MetricsAccumulator {
    pub fn add(mut self, pred: &[Vec<Xy>], truth: &[Vec<Xy>]) -> Result<Self> {
        if pred.len() != truth.len() {
            invalid!("metrics: {} predicted vehicles vs {} true", pred.len(), truth.len());
        }
        for (p, t) in pred.iter().zip(truth) {
            if p.len() != t.len() || p.is_empty() {
                invalid!("metrics: step count mismatch ({} vs {})", p.len(), t.len());
            }
            for (a, b) in p.iter().zip(t) {
                let dx = a[0] - b[0];
                let dy = a[1] - b[1];
                self.disp_sum += dx.hypot(dy);
                self.disp_count += 1;
                self.sq_sum += dx * dx + dy * dy;
                self.coord_count += 2;
            }
            let (a, b) = (p[p.len() - 1], t[t.len() - 1]);
            self.final_sum += (a[0] - b[0]).hypot(a[1] - b[1]);
            self.final_count += 1;
        }
        Ok(self)
    }

    pub fn finish(&self) -> Metrics {
        let div = |s: f64, c: usize| if c == 0 { 0.0 } else { s / c as f64 };
        Metrics {
            ade: div(self.disp_sum, self.disp_count),
            fde: div(self.final_sum, self.final_count),
            rmse: div(self.sq_sum, self.coord_count).sqrt(),
        }
    }
}
