//! Graph-linear trajectory predictor.
//!
//! For vehicle `i` with flattened relative history `h_i` (length 2τ) and
//! neighbour aggregate `g_i = Σ_j A_ij h_j`, the model predicts per-step
//! displacement residuals
//!
//! ```text
//! d_i = h_i · W_self + g_i · W_nbr + b          (length 2·T_f)
//! ```
//!
//! on top of a constant-velocity prior `v_i = h_i[τ-1] - h_i[τ-2]`. The
//! predicted relative position at future step `t` (1-based) is
//! `t · v_i + Σ_{k ≤ t} d_ik`.
//!
//! The loss is the mean Euclidean displacement error over all vehicles and
//! future steps of a batch, and its gradient is computed in closed form.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::scene::{ObservationWindow, Xy};
use crate::similarity::{build_weighted_graph, SimWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub tau: usize,
    pub t_f: usize,
}

impl Dims {
    pub fn new(tau: usize, t_f: usize) -> Result<Self> {
        if tau < 2 || t_f < 1 {
            invalid!("need τ ≥ 2 and T_f ≥ 1, got ({tau}, {t_f})");
        }
        Ok(Self { tau, t_f })
    }

    pub fn input(&self) -> usize {
        2 * self.tau
    }

    pub fn output(&self) -> usize {
        2 * self.t_f
    }

    pub fn matrix_len(&self) -> usize {
        self.input() * self.output()
    }

    pub fn param_count(&self) -> usize {
        2 * self.matrix_len() + self.output()
    }
}

/// Flat parameter vector laid out as `[W_self | W_nbr | bias]`, matrices
/// row-major with shape `2τ × 2T_f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: Dims,
    pub values: Vec<f64>,
}

pub type Gradients = ModelParams;

impl ModelParams {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            values: vec![0.0; dims.param_count()],
        }
    }

    pub fn from_values(dims: Dims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.param_count() {
            invalid!("expected {} parameters for {:?}, got {}", dims.param_count(), dims, values.len());
        }
        Ok(Self { dims, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn w_self(&self) -> &[f64] {
        &self.values[..self.dims.matrix_len()]
    }

    pub fn w_nbr(&self) -> &[f64] {
        let m = self.dims.matrix_len();
        &self.values[m..2 * m]
    }

    pub fn bias(&self) -> &[f64] {
        &self.values[2 * self.dims.matrix_len()..]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_dims(&self, other: &ModelParams) -> Result<()> {
        if self.dims != other.dims || self.values.len() != other.values.len() {
            invalid!("parameter dims differ: {:?} vs {:?}", self.dims, other.dims);
        }
        Ok(())
    }

    /// `self - other`.
    pub fn delta(&self, other: &ModelParams) -> Result<ModelParams> {
        self.check_dims(other)?;
        Ok(Self {
            dims: self.dims,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        })
    }

    /// `self + k · other`, in place.
    pub fn axpy(&mut self, k: f64, other: &ModelParams) -> Result<()> {
        self.check_dims(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: ModelParams = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        Self::from_values(p.dims, p.values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn init_params(dims: Dims, scale: f64, seed: u64) -> Result<ModelParams> {
    if !(scale >= 0.0) {
        invalid!("init scale must be non-negative, got {scale}");
    }
    if scale == 0.0 {
        return Ok(ModelParams::zeros(dims));
    }
    let mut rng = rng::substream(seed, "init-params", &[]);
    let values = (0..dims.param_count())
        .map(|_| rng.random_range(-scale..=scale))
        .collect();
    Ok(ModelParams { dims, values })
}

// ---------------------------------------------------------------------------
// Batches

/// How neighbour weights are derived for a window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AdjacencyMode {
    /// Row-normalized trajectory similarity.
    Similarity { weights: SimWeights, eps_lcs: f64 },
    /// Uniform weights over vehicles within `threshold` meters.
    Distance { threshold: f64 },
    /// No neighbour term.
    Isolated,
}

impl Default for AdjacencyMode {
    fn default() -> Self {
        AdjacencyMode::Similarity {
            weights: SimWeights::default(),
            eps_lcs: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneBatch {
    pub windows: Vec<ObservationWindow>,
    /// Per-window `n × n` row-normalized adjacency with a zero diagonal.
    pub adjacency: Vec<Vec<Vec<f64>>>,
}

fn row_normalize(mut m: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 0.0;
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    m
}

pub fn adjacency_for(window: &ObservationWindow, mode: &AdjacencyMode) -> Result<Vec<Vec<f64>>> {
    let n = window.n_vehicles();
    let raw = match mode {
        AdjacencyMode::Similarity { weights, eps_lcs } => build_weighted_graph(window, weights, *eps_lcs)?.edges,
        AdjacencyMode::Distance { threshold } => (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let (a, b) = (window.anchors[i], window.anchors[j]);
                        if i != j && (a[0] - b[0]).hypot(a[1] - b[1]) <= *threshold {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect(),
        AdjacencyMode::Isolated => vec![vec![0.0; n]; n],
    };
    Ok(row_normalize(raw))
}

impl SceneBatch {
    pub fn new(windows: Vec<ObservationWindow>, mode: &AdjacencyMode) -> Result<Self> {
        let adjacency = windows
            .iter()
            .map(|w| adjacency_for(w, mode))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { windows, adjacency })
    }

    pub fn with_adjacency(windows: Vec<ObservationWindow>, adjacency: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if windows.len() != adjacency.len() {
            invalid!("{} windows but {} adjacency matrices", windows.len(), adjacency.len());
        }
        for (w, a) in windows.iter().zip(&adjacency) {
            let n = w.n_vehicles();
            if a.len() != n || a.iter().any(|row| row.len() != n) {
                invalid!("adjacency shape does not match {n} vehicles");
            }
        }
        Ok(Self { windows, adjacency })
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Number of (vehicle, window) samples.
    pub fn samples(&self) -> usize {
        self.windows.iter().map(ObservationWindow::n_vehicles).sum()
    }

    pub fn truth(&self) -> Vec<Vec<Vec<Xy>>> {
        self.windows.iter().map(|w| w.future.clone()).collect()
    }

    fn check(&self, dims: Dims) -> Result<()> {
        for w in &self.windows {
            if w.n_vehicles() > 0 && (w.history_len() != dims.tau || w.future_len() != dims.t_f) {
                invalid!(
                    "window shape (τ={}, T_f={}) does not match model {:?}",
                    w.history_len(),
                    w.future_len(),
                    dims
                );
            }
        }
        Ok(())
    }
}

fn flatten(history: &[Xy]) -> Vec<f64> {
    history.iter().flat_map(|p| [p[0], p[1]]).collect()
}

/// Per-vehicle inputs of one window: (h_i, g_i, v_i).
struct WindowInputs {
    h: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    v: Vec<Xy>,
}

fn window_inputs(w: &ObservationWindow, adj: &[Vec<f64>], tau: usize) -> WindowInputs {
    let h: Vec<Vec<f64>> = w.history.iter().map(|hist| flatten(hist)).collect();
    let n = h.len();
    let dim = 2 * tau;
    let g = (0..n)
        .map(|i| {
            let mut acc = vec![0.0; dim];
            for j in 0..n {
                let a = adj[i][j];
                if a != 0.0 {
                    for (x, y) in acc.iter_mut().zip(&h[j]) {
                        *x += a * y;
                    }
                }
            }
            acc
        })
        .collect();
    let v = w
        .history
        .iter()
        .map(|hist| {
            let (a, b) = (hist[tau - 2], hist[tau - 1]);
            [b[0] - a[0], b[1] - a[1]]
        })
        .collect();
    WindowInputs { h, g, v }
}

/// `x · W` for row-major `W` of shape `x.len() × out`.
fn vec_mat(x: &[f64], w: &[f64], out: usize, acc: &mut [f64]) {
    for (r, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let row = &w[r * out..(r + 1) * out];
        for (a, &wv) in acc.iter_mut().zip(row) {
            *a += xv * wv;
        }
    }
}

/// Predicted relative future positions, `[window][vehicle][step]`.
pub fn forward(params: &ModelParams, batch: &SceneBatch) -> Result<Vec<Vec<Vec<Xy>>>> {
    let dims = params.dims;
    batch.check(dims)?;
    let out = dims.output();
    let mut preds = Vec::with_capacity(batch.windows.len());
    for (w, adj) in batch.windows.iter().zip(&batch.adjacency) {
        let inp = window_inputs(w, adj, dims.tau);
        let mut wp = Vec::with_capacity(w.n_vehicles());
        for i in 0..w.n_vehicles() {
            let mut d = params.bias().to_vec();
            vec_mat(&inp.h[i], params.w_self(), out, &mut d);
            vec_mat(&inp.g[i], params.w_nbr(), out, &mut d);
            let mut pos = [0.0, 0.0];
            let mut steps = Vec::with_capacity(dims.t_f);
            for t in 0..dims.t_f {
                pos[0] += inp.v[i][0] + d[2 * t];
                pos[1] += inp.v[i][1] + d[2 * t + 1];
                steps.push(pos);
            }
            wp.push(steps);
        }
        preds.push(wp);
    }
    Ok(preds)
}

/// Mean Euclidean error over all vehicles and steps.
pub fn loss(pred: &[Vec<Vec<Xy>>], truth: &[Vec<Vec<Xy>>]) -> Result<f64> {
    if pred.len() != truth.len() {
        invalid!("loss: {} predicted windows vs {} true", pred.len(), truth.len());
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (pw, tw) in pred.iter().zip(truth) {
        if pw.len() != tw.len() {
            invalid!("loss: vehicle count mismatch");
        }
        for (p, t) in pw.iter().zip(tw) {
            if p.len() != t.len() {
                invalid!("loss: step count mismatch");
            }
            for (a, b) in p.iter().zip(t) {
                sum += (a[0] - b[0]).hypot(a[1] - b[1]);
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

pub fn batch_loss(params: &ModelParams, batch: &SceneBatch) -> Result<f64> {
    loss(&forward(params, batch)?, &batch.truth())
}

/// Analytic gradient of [`loss`] with respect to every parameter. A zero
/// residual contributes a zero subgradient.
pub fn backward(params: &ModelParams, batch: &SceneBatch, truth: &[Vec<Vec<Xy>>]) -> Result<Gradients> {
    let dims = params.dims;
    let preds = forward(params, batch)?;
    if truth.len() != preds.len() {
        invalid!("backward: truth has {} windows, batch {}", truth.len(), preds.len());
    }
    let count: usize = preds.iter().map(|w| w.len() * dims.t_f).sum();
    let mut grad = ModelParams::zeros(dims);
    if count == 0 {
        return Ok(grad);
    }
    let (m, out) = (dims.matrix_len(), dims.output());
    let scale = 1.0 / count as f64;
    for ((w, adj), (pw, tw)) in batch.windows.iter().zip(&batch.adjacency).zip(preds.iter().zip(truth)) {
        if tw.len() != pw.len() {
            invalid!("backward: vehicle count mismatch");
        }
        let inp = window_inputs(w, adj, dims.tau);
        for i in 0..pw.len() {
            // dL/dP_t, then reverse cumulative sum gives dL/dd_k.
            let mut delta = vec![0.0; out];
            let mut carry = [0.0, 0.0];
            for t in (0..dims.t_f).rev() {
                let e = [pw[i][t][0] - tw[i][t][0], pw[i][t][1] - tw[i][t][1]];
                let r = e[0].hypot(e[1]);
                if r > 0.0 {
                    carry[0] += scale * e[0] / r;
                    carry[1] += scale * e[1] / r;
                }
                delta[2 * t] = carry[0];
                delta[2 * t + 1] = carry[1];
            }
            let g = &mut grad.values;
            for (r, (&hv, &gv)) in inp.h[i].iter().zip(&inp.g[i]).enumerate() {
                for c in 0..out {
                    g[r * out + c] += hv * delta[c];
                    g[m + r * out + c] += gv * delta[c];
                }
            }
            for c in 0..out {
                g[2 * m + c] += delta[c];
            }
        }
    }
    Ok(grad)
}

pub fn sgd_step(params: &ModelParams, grads: &Gradients, lr: f64) -> Result<ModelParams> {
    if !(lr >= 0.0) {
        invalid!("learning rate must be non-negative, got {lr}");
    }
    let mut next = params.clone();
    next.axpy(-lr, grads)?;
    Ok(next)
}

/// Full-batch gradient descent for `epochs` steps; returns the final loss.
pub fn local_train(params: &ModelParams, batch: &SceneBatch, epochs: usize, lr: f64) -> Result<(ModelParams, f64)> {
    if epochs == 0 {
        invalid!("local training needs at least one epoch");
    }
    let truth = batch.truth();
    let mut p = params.clone();
    for epoch in 0..epochs {
        let g = backward(&p, batch, &truth)?;
        p = sgd_step(&p, &g, lr)?;
        if !p.is_finite() {
            return Err(Error::Divergence { epoch, loss: f64::NAN });
        }
    }
    let final_loss = batch_loss(&p, batch)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence { epoch: epochs, loss: final_loss });
    }
    Ok((p, final_loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cv_window(n: usize, tau: usize, t_f: usize) -> ObservationWindow {
        // Vehicle i moves at (i+1, 0.5 i) per frame.
        let vel = |i: usize| [(i + 1) as f64, 0.5 * i as f64];
        ObservationWindow {
            start_frame: 0,
            vehicle_ids: (0..n as u32).collect(),
            anchors: (0..n).map(|i| [10.0 * i as f64, 0.0]).collect(),
            history: (0..n)
                .map(|i| {
                    (0..tau)
                        .map(|k| {
                            let s = k as f64 - (tau - 1) as f64;
                            [s * vel(i)[0], s * vel(i)[1]]
                        })
                        .collect()
                })
                .collect(),
            future: (0..n)
                .map(|i| (1..=t_f).map(|t| [t as f64 * vel(i)[0], t as f64 * vel(i)[1]]).collect())
                .collect(),
        }
    }

    #[test]
    fn zero_params_follow_constant_velocity() {
        let dims = Dims::new(3, 4).unwrap();
        let batch = SceneBatch::new(vec![cv_window(3, 3, 4)], &AdjacencyMode::Isolated).unwrap();
        let pred = forward(&ModelParams::zeros(dims), &batch).unwrap();
        assert_eq!(pred[0], batch.windows[0].future);
        assert_eq!(batch_loss(&ModelParams::zeros(dims), &batch).unwrap(), 0.0);
        let g = backward(&ModelParams::zeros(dims), &batch, &batch.truth()).unwrap();
        assert!(g.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn init_and_sgd_basics() {
        let dims = Dims::new(2, 1).unwrap();
        assert_eq!(init_params(dims, 0.0, 1).unwrap(), ModelParams::zeros(dims));
        let a = init_params(dims, 0.1, 5).unwrap();
        assert_eq!(a, init_params(dims, 0.1, 5).unwrap());
        assert!(a.values.iter().all(|v| v.abs() <= 0.1));
        assert_eq!(sgd_step(&a, &a, 0.0).unwrap(), a);
        assert!(local_train(&a, &SceneBatch::new(vec![], &AdjacencyMode::Isolated).unwrap(), 0, 0.1).is_err());
    }

    #[test]
    fn bias_gradient_single_vehicle_single_step() {
        // τ=2, T_f=1, stationary history, truth (3, 4): the prediction is the
        // bias itself, so dL/db = (b - y)/|b - y|.
        let dims = Dims::new(2, 1).unwrap();
        let w = ObservationWindow {
            start_frame: 0,
            vehicle_ids: vec![1],
            anchors: vec![[0.0, 0.0]],
            history: vec![vec![[0.0, 0.0], [0.0, 0.0]]],
            future: vec![vec![[3.0, 4.0]]],
        };
        let batch = SceneBatch::new(vec![w], &AdjacencyMode::Isolated).unwrap();
        let g = backward(&ModelParams::zeros(dims), &batch, &batch.truth()).unwrap();
        assert_eq!(g.bias(), &[-0.6, -0.8]);
        assert!(g.w_self().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let p = init_params(Dims::new(3, 2).unwrap(), 0.7, 99).unwrap();
        assert_eq!(ModelParams::from_json(&p.to_json()).unwrap(), p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        p.save(&path).unwrap();
        assert_eq!(ModelParams::load(&path).unwrap(), p);
    }

    #[test]
    fn dims_mismatch_rejected() {
        let batch = SceneBatch::new(vec![cv_window(2, 3, 2)], &AdjacencyMode::Isolated).unwrap();
        assert!(forward(&ModelParams::zeros(Dims::new(4, 2).unwrap()), &batch).is_err());
    }

    #[test]
    fn adjacency_rows_are_normalized() {
        let w = cv_window(4, 3, 2);
        for mode in [AdjacencyMode::default(), AdjacencyMode::Distance { threshold: 15.0 }] {
            for (i, row) in adjacency_for(&w, &mode).unwrap().iter().enumerate() {
                assert_eq!(row[i], 0.0);
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12 || s == 0.0);
            }
        }
    }
}
