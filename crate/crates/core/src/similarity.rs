//! Trajectory-segment similarity and weighted trajectory graphs.
//!
//! Dissimilarity between two segments is a convex combination of a
//! velocity term, an LCS position term and an orientation term, each in
//! `[0, 1]`. Similarity is `1 - diss`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scene::{ObservationWindow, TrajectoryPoint, Xy};

/// Timestamped positions of one vehicle over a common window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySegment {
    pub points: Vec<TrajectoryPoint>,
}

impl TrajectorySegment {
    pub fn new(points: Vec<TrajectoryPoint>) -> Self {
        Self { points }
    }

    /// Consecutive-frame positions starting at `start_frame`.
    pub fn from_xy(start_frame: u32, xy: &[Xy]) -> Self {
        Self {
            points: xy
                .iter()
                .enumerate()
                .map(|(k, p)| TrajectoryPoint::new(start_frame + k as u32, p[0], p[1]))
                .collect(),
        }
    }

    /// Finite-difference speeds in meters per frame.
    fn speeds(&self) -> Result<Vec<f64>> {
        if self.points.len() < 2 {
            invalid!("segment needs at least 2 points for speeds, has {}", self.points.len());
        }
        Ok(self
            .points
            .windows(2)
            .map(|w| {
                let dt = w[1].t.saturating_sub(w[0].t).max(1) as f64;
                (w[1].x - w[0].x).hypot(w[1].y - w[0].y) / dt
            })
            .collect())
    }

    /// Mean displacement per step; zero for fewer than two points.
    fn mean_heading(&self) -> Xy {
        let n = self.points.len();
        if n < 2 {
            return [0.0, 0.0];
        }
        let (a, b) = (self.points[0], self.points[n - 1]);
        let steps = (n - 1) as f64;
        [(b.x - a.x) / steps, (b.y - a.y) / steps]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimWeights {
    pub rho1: f64,
    pub rho2: f64,
    pub rho3: f64,
}

impl Default for SimWeights {
    fn default() -> Self {
        Self {
            rho1: 1.0 / 3.0,
            rho2: 1.0 / 3.0,
            rho3: 1.0 / 3.0,
        }
    }
}

impl SimWeights {
    pub fn new(rho1: f64, rho2: f64, rho3: f64) -> Result<Self> {
        let w = Self { rho1, rho2, rho3 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { rho1, rho2, rho3 } = *self;
        if rho1 < 0.0 || rho2 < 0.0 || rho3 < 0.0 {
            invalid!("similarity weights must be non-negative: ({rho1}, {rho2}, {rho3})");
        }
        if (rho1 + rho2 + rho3 - 1.0).abs() > 1e-12 {
            invalid!("similarity weights must sum to 1, got {}", rho1 + rho2 + rho3);
        }
        Ok(())
    }
}

pub fn velocity_diff(a: &TrajectorySegment, b: &TrajectorySegment) -> Result<f64> {
    let (sa, sb) = (a.speeds()?, b.speeds()?);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let max = sa.iter().chain(&sb).copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(0.0);
    }
    Ok(((mean(&sa) - mean(&sb)).abs() / max).clamp(0.0, 1.0))
}

/// Length of the longest common subsequence, where two points match when
/// they lie within `eps` meters of each other.
pub fn lcs_len(a: &[TrajectoryPoint], b: &[TrajectoryPoint], eps: f64) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for p in a {
        for (j, q) in b.iter().enumerate() {
            cur[j + 1] = if (p.x - q.x).hypot(p.y - q.y) <= eps {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn position_diff(a: &TrajectorySegment, b: &TrajectorySegment, eps_lcs: f64) -> Result<f64> {
    let longest = a.points.len().max(b.points.len());
    if a.points.is_empty() || b.points.is_empty() {
        invalid!("position_diff needs non-empty segments");
    }
    let common = lcs_len(&a.points, &b.points, eps_lcs);
    Ok((longest - common) as f64 / longest as f64)
}

/// Angle in `[0, π]` between the mean headings of two segments; zero when
/// either segment does not move.
pub fn heading_angle(a: &TrajectorySegment, b: &TrajectorySegment) -> f64 {
    let (u, v) = (a.mean_heading(), b.mean_heading());
    let (nu, nv) = (u[0].hypot(u[1]), v[0].hypot(v[1]));
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    let cross = u[0] * v[1] - u[1] * v[0];
    let dot = u[0] * v[0] + u[1] * v[1];
    cross.abs().atan2(dot)
}

pub fn orientation_diff(phi: f64) -> Result<f64> {
    if !(0.0..=PI).contains(&phi) {
        invalid!("orientation angle must lie in [0, π], got {phi}");
    }
    Ok(if phi == 0.0 {
        0.0
    } else if phi <= FRAC_PI_2 {
        phi.sin() / 2.0
    } else {
        0.5 + (phi + FRAC_PI_2).sin().abs() / 2.0
    })
}

/// The three dissimilarity components `(velocity, position, orientation)`.
pub fn components(a: &TrajectorySegment, b: &TrajectorySegment, eps_lcs: f64) -> Result<[f64; 3]> {
    Ok([
        velocity_diff(a, b)?,
        position_diff(a, b, eps_lcs)?,
        orientation_diff(heading_angle(a, b))?,
    ])
}

pub fn combine(c: [f64; 3], w: &SimWeights) -> f64 {
    (w.rho1 * c[0] + w.rho2 * c[1] + w.rho3 * c[2]).clamp(0.0, 1.0)
}

pub fn diss(a: &TrajectorySegment, b: &TrajectorySegment, w: &SimWeights, eps_lcs: f64) -> Result<f64> {
    w.validate()?;
    Ok(combine(components(a, b, eps_lcs)?, w))
}

pub fn sim(a: &TrajectorySegment, b: &TrajectorySegment, w: &SimWeights, eps_lcs: f64) -> Result<f64> {
    Ok(1.0 - diss(a, b, w, eps_lcs)?)
}

// ---------------------------------------------------------------------------
// Weighted trajectory graphs

/// Undirected graph over the vehicles of one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedTrajectoryGraph {
    pub frame: u32,
    pub vehicle_ids: Vec<u32>,
    pub node_weights: Vec<f64>,
    /// Symmetric similarity matrix; the diagonal is zero.
    pub edges: Vec<Vec<f64>>,
}

impl WeightedTrajectoryGraph {
    pub fn len(&self) -> usize {
        self.vehicle_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vehicle_ids.is_empty()
    }

    pub fn edge(&self, i: usize, j: usize) -> f64 {
        self.edges[i][j]
    }
}

/// Build the similarity graph of a window from its absolute history segments.
pub fn build_weighted_graph(
    window: &ObservationWindow,
    weights: &SimWeights,
    eps_lcs: f64,
) -> Result<WeightedTrajectoryGraph> {
    weights.validate()?;
    let n = window.n_vehicles();
    if n == 0 {
        invalid!("window at frame {} has no vehicles", window.start_frame);
    }
    let segments: Vec<TrajectorySegment> = (0..n)
        .map(|i| TrajectorySegment::from_xy(window.start_frame, &window.absolute_history(i)))
        .collect();
    let mut edges = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = sim(&segments[i], &segments[j], weights, eps_lcs)?;
            edges[i][j] = s;
            edges[j][i] = s;
        }
    }
    let node_weights = (0..n)
        .map(|i| {
            if n == 1 {
                1.0
            } else {
                edges[i].iter().sum::<f64>() / (n - 1) as f64
            }
        })
        .collect();
    Ok(WeightedTrajectoryGraph {
        frame: window.start_frame,
        vehicle_ids: window.vehicle_ids.clone(),
        node_weights,
        edges,
    })
}

/// Fixed-length normalized serialization of a graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqVector {
    pub values: Vec<f64>,
}

pub fn seq_len(k: usize) -> usize {
    k + k * k.saturating_sub(1) / 2
}

/// Serialize the top-`k` vertices (by node weight, ties by vehicle id) and
/// the edges among them, min-max normalized jointly. Graphs with fewer than
/// `k` vehicles are padded with zero weights and zero edges.
pub fn serialize_seq(graph: &WeightedTrajectoryGraph, k: usize) -> Result<SeqVector> {
    if k == 0 {
        invalid!("k must be at least 1");
    }
    let mut order: Vec<usize> = (0..graph.len()).collect();
    order.sort_by(|&a, &b| {
        graph.node_weights[b]
            .total_cmp(&graph.node_weights[a])
            .then(graph.vehicle_ids[a].cmp(&graph.vehicle_ids[b]))
    });
    let reps: Vec<Option<usize>> = (0..k).map(|r| order.get(r).copied()).collect();

    let mut values = Vec::with_capacity(seq_len(k));
    values.extend(reps.iter().map(|r| r.map_or(0.0, |i| graph.node_weights[i])));
    for a in 0..k {
        for b in a + 1..k {
            values.push(match (reps[a], reps[b]) {
                (Some(i), Some(j)) => graph.edge(i, j),
                _ => 0.0,
            });
        }
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > 0.0 {
        values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else {
        values.iter_mut().for_each(|v| *v = 0.5);
    }
    Ok(SeqVector { values })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub const REDUNDANCY_THRESHOLD: f64 = 0.8;

/// Indices of vectors kept after dropping those that are too similar to an
/// earlier kept vector. Zero vectors are never kept.
pub fn cosine_redundancy_filter(seqs: &[SeqVector], threshold: f64) -> Result<Vec<usize>> {
    let Some(first) = seqs.first() else {
        return Ok(Vec::new());
    };
    let len = first.values.len();
    if let Some(bad) = seqs.iter().find(|s| s.values.len() != len) {
        invalid!("seq length mismatch: {} vs {}", bad.values.len(), len);
    }
    let mut kept: Vec<usize> = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        if s.values.iter().all(|v| *v == 0.0) {
            continue;
        }
        if kept
            .iter()
            .all(|&j| cosine(&s.values, &seqs[j].values) <= threshold)
        {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// One vector per row, for debugging dumps.
pub fn seqs_to_csv(seqs: &[SeqVector]) -> String {
    let mut out = String::new();
    for s in seqs {
        let row: Vec<String> = s.values.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}
