//! Model parameters, initialization, and the forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dist::TwoPartDist;
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Spread of the predictive log-normal is clamped to this range to keep
/// likelihoods non-degenerate.
pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 1e3;

/// Recurrent cell family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Elman,
    Gru,
}

impl CellKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "elman" => Ok(CellKind::Elman),
            "gru" => Ok(CellKind::Gru),
            other => Err(Error::Config(format!("unknown cell kind {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Elman => "elman",
            CellKind::Gru => "gru",
        }
    }
}

/// Recurrent cell parameters.
#[derive(Debug, Clone)]
pub enum CellParams {
    /// h_t = tanh(W_x x_t + W_h h_{t-1} + b)
    Elman { w_x: Mat, w_h: Mat, b: Vec<f64> },
    /// Standard gated update with update gate z, reset gate r and
    /// candidate c; h_t = (1-z) ∘ h_{t-1} + z ∘ c.
    Gru {
        w_z: Mat,
        u_z: Mat,
        b_z: Vec<f64>,
        w_r: Mat,
        u_r: Mat,
        b_r: Vec<f64>,
        w_c: Mat,
        u_c: Mat,
        b_c: Vec<f64>,
    },
}

/// Backward projector g(h) = h + W2 · ReLU(W1 h + b1) + b2.
///
/// W2 and b2 start at zero so that g is the identity at epoch 0 while
/// gradients can still enter the residual branch through W1.
#[derive(Debug, Clone)]
pub struct Projector {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl Projector {
    /// Residual-form application.
    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        let (g, _) = self.apply_cached(h);
        g
    }

    /// Returns (g(h), pre-activation W1 h + b1) for backward reuse.
    pub fn apply_cached(&self, h: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut a = self.b1.clone();
        self.w1.matvec_add(h, &mut a);
        let relu: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();
        let mut g = self.b2.clone();
        self.w2.matvec_add(&relu, &mut g);
        for (gi, hi) in g.iter_mut().zip(h.iter()) {
            *gi += hi;
        }
        (g, a)
    }
}

/// Per-lead point head: y = W h + b, one row per lead.
#[derive(Debug, Clone)]
pub struct PointHead {
    pub w: Mat,
    pub b: Vec<f64>,
}

/// Two-layer perceptron h ↦ (logit pi0, mu, log sigma) per lead.
#[derive(Debug, Clone)]
pub struct DistHead {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

/// Full forecaster: recurrent cell, backward projector, point head,
/// distribution head.
#[derive(Debug, Clone)]
pub struct RmModel {
    pub cell_kind: CellKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_leads: usize,
    pub cell: CellParams,
    pub proj: Projector,
    pub point: PointHead,
    pub dist: DistHead,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Mat { rows, cols, data }
}

impl RmModel {
    /// Fresh model: Xavier-initialized weights, zero biases, and a
    /// zero-initialized projector residual branch (g = identity).
    pub fn new(
        cell_kind: CellKind,
        input_dim: usize,
        hidden_dim: usize,
        n_leads: usize,
        seed: u64,
    ) -> Result<Self> {
        if hidden_dim < 1 || input_dim < 1 || n_leads < 1 {
            return Err(Error::Config(
                "input_dim, hidden_dim and n_leads must all be >= 1".into(),
            ));
        }
        let d = hidden_dim;
        let m = input_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = match cell_kind {
            CellKind::Elman => CellParams::Elman {
                w_x: xavier(&mut rng, d, m),
                w_h: xavier(&mut rng, d, d),
                b: vec![0.0; d],
            },
            CellKind::Gru => CellParams::Gru {
                w_z: xavier(&mut rng, d, m),
                u_z: xavier(&mut rng, d, d),
                b_z: vec![0.0; d],
                w_r: xavier(&mut rng, d, m),
                u_r: xavier(&mut rng, d, d),
                b_r: vec![0.0; d],
                w_c: xavier(&mut rng, d, m),
                u_c: xavier(&mut rng, d, d),
                b_c: vec![0.0; d],
            },
        };
        let proj = Projector {
            w1: xavier(&mut rng, d, d),
            b1: vec![0.0; d],
            w2: Mat::zeros(d, d),
            b2: vec![0.0; d],
        };
        let point = PointHead {
            w: xavier(&mut rng, n_leads, d),
            b: vec![0.0; n_leads],
        };
        let dist = DistHead {
            w1: xavier(&mut rng, d, d),
            b1: vec![0.0; d],
            w2: xavier(&mut rng, 3 * n_leads, d),
            b2: vec![0.0; 3 * n_leads],
        };
        Ok(RmModel {
            cell_kind,
            input_dim,
            hidden_dim,
            n_leads,
            cell,
            proj,
            point,
            dist,
        })
    }

    /// Same shapes, all parameters zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> RmModel {
        let mut z = self.clone();
        z.for_each_tensor_mut(&mut |_, _, _, data| data.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    /// Visits every parameter tensor in a fixed order as
    /// (name, rows, cols, values); vectors report cols = 1.
    pub fn for_each_tensor(&self, f: &mut dyn FnMut(&'static str, usize, usize, &[f64])) {
        match &self.cell {
            CellParams::Elman { w_x, w_h, b } => {
                f("cell.w_x", w_x.rows, w_x.cols, &w_x.data);
                f("cell.w_h", w_h.rows, w_h.cols, &w_h.data);
                f("cell.b", b.len(), 1, b);
            }
            CellParams::Gru {
                w_z,
                u_z,
                b_z,
                w_r,
                u_r,
                b_r,
                w_c,
                u_c,
                b_c,
            } => {
                f("cell.w_z", w_z.rows, w_z.cols, &w_z.data);
                f("cell.u_z", u_z.rows, u_z.cols, &u_z.data);
                f("cell.b_z", b_z.len(), 1, b_z);
                f("cell.w_r", w_r.rows, w_r.cols, &w_r.data);
                f("cell.u_r", u_r.rows, u_r.cols, &u_r.data);
                f("cell.b_r", b_r.len(), 1, b_r);
                f("cell.w_c", w_c.rows, w_c.cols, &w_c.data);
                f("cell.u_c", u_c.rows, u_c.cols, &u_c.data);
                f("cell.b_c", b_c.len(), 1, b_c);
            }
        }
        f("proj.w1", self.proj.w1.rows, self.proj.w1.cols, &self.proj.w1.data);
        f("proj.b1", self.proj.b1.len(), 1, &self.proj.b1);
        f("proj.w2", self.proj.w2.rows, self.proj.w2.cols, &self.proj.w2.data);
        f("proj.b2", self.proj.b2.len(), 1, &self.proj.b2);
        f("point.w", self.point.w.rows, self.point.w.cols, &self.point.w.data);
        f("point.b", self.point.b.len(), 1, &self.point.b);
        f("dist.w1", self.dist.w1.rows, self.dist.w1.cols, &self.dist.w1.data);
        f("dist.b1", self.dist.b1.len(), 1, &self.dist.b1);
        f("dist.w2", self.dist.w2.rows, self.dist.w2.cols, &self.dist.w2.data);
        f("dist.b2", self.dist.b2.len(), 1, &self.dist.b2);
    }

    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&'static str, usize, usize, &mut [f64])) {
        match &mut self.cell {
            CellParams::Elman { w_x, w_h, b } => {
                f("cell.w_x", w_x.rows, w_x.cols, &mut w_x.data);
                f("cell.w_h", w_h.rows, w_h.cols, &mut w_h.data);
                f("cell.b", b.len(), 1, b);
            }
            CellParams::Gru {
                w_z,
                u_z,
                b_z,
                w_r,
                u_r,
                b_r,
                w_c,
                u_c,
                b_c,
            } => {
                f("cell.w_z", w_z.rows, w_z.cols, &mut w_z.data);
                f("cell.u_z", u_z.rows, u_z.cols, &mut u_z.data);
                f("cell.b_z", b_z.len(), 1, b_z);
                f("cell.w_r", w_r.rows, w_r.cols, &mut w_r.data);
                f("cell.u_r", u_r.rows, u_r.cols, &mut u_r.data);
                f("cell.b_r", b_r.len(), 1, b_r);
                f("cell.w_c", w_c.rows, w_c.cols, &mut w_c.data);
                f("cell.u_c", u_c.rows, u_c.cols, &mut u_c.data);
                f("cell.b_c", b_c.len(), 1, b_c);
            }
        }
        let p = &mut self.proj;
        f("proj.w1", p.w1.rows, p.w1.cols, &mut p.w1.data);
        f("proj.b1", p.b1.len(), 1, &mut p.b1);
        f("proj.w2", p.w2.rows, p.w2.cols, &mut p.w2.data);
        f("proj.b2", p.b2.len(), 1, &mut p.b2);
        let ph = &mut self.point;
        f("point.w", ph.w.rows, ph.w.cols, &mut ph.w.data);
        f("point.b", ph.b.len(), 1, &mut ph.b);
        let dh = &mut self.dist;
        f("dist.w1", dh.w1.rows, dh.w1.cols, &mut dh.w1.data);
        f("dist.b1", dh.b1.len(), 1, &mut dh.b1);
        f("dist.w2", dh.w2.rows, dh.w2.cols, &mut dh.w2.data);
        f("dist.b2", dh.b2.len(), 1, &mut dh.b2);
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(&mut |_, _, _, data| n += data.len());
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.for_each_tensor(&mut |_, _, _, data| out.extend_from_slice(data));
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.for_each_tensor_mut(&mut |_, _, _, data| {
            data.copy_from_slice(&flat[off..off + data.len()]);
            off += data.len();
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    /// One recurrent step (x_t, h_prev) ↦ h_t.
    pub fn cell_forward(&self, x: &[f64], h_prev: &[f64]) -> Vec<f64> {
        self.cell_forward_cached(x, h_prev).0
    }

    pub(crate) fn cell_forward_cached(&self, x: &[f64], h_prev: &[f64]) -> (Vec<f64>, CellCache) {
        debug_assert_eq!(x.len(), self.input_dim);
        debug_assert_eq!(h_prev.len(), self.hidden_dim);
        match &self.cell {
            CellParams::Elman { w_x, w_h, b } => {
                let mut a = b.clone();
                w_x.matvec_add(x, &mut a);
                w_h.matvec_add(h_prev, &mut a);
                let h: Vec<f64> = a.iter().map(|v| v.tanh()).collect();
                (h, CellCache::Elman)
            }
            CellParams::Gru {
                w_z,
                u_z,
                b_z,
                w_r,
                u_r,
                b_r,
                w_c,
                u_c,
                b_c,
            } => {
                let mut az = b_z.clone();
                w_z.matvec_add(x, &mut az);
                u_z.matvec_add(h_prev, &mut az);
                let z: Vec<f64> = az.iter().map(|v| sigmoid(*v)).collect();
                let mut ar = b_r.clone();
                w_r.matvec_add(x, &mut ar);
                u_r.matvec_add(h_prev, &mut ar);
                let r: Vec<f64> = ar.iter().map(|v| sigmoid(*v)).collect();
                let rh: Vec<f64> = r.iter().zip(h_prev.iter()).map(|(a, b)| a * b).collect();
                let mut ac = b_c.clone();
                w_c.matvec_add(x, &mut ac);
                u_c.matvec_add(&rh, &mut ac);
                let c: Vec<f64> = ac.iter().map(|v| v.tanh()).collect();
                let h: Vec<f64> = z
                    .iter()
                    .zip(c.iter())
                    .zip(h_prev.iter())
                    .map(|((zi, ci), hi)| (1.0 - zi) * hi + zi * ci)
                    .collect();
                (h, CellCache::Gru { z, r, c, rh })
            }
        }
    }

    /// Applies both heads to a hidden state; returns (point per lead,
    /// dist-head hidden activation, raw dist outputs).
    pub(crate) fn heads(&self, h: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut y = self.point.b.clone();
        self.point.w.matvec_add(h, &mut y);
        let mut a = self.dist.b1.clone();
        self.dist.w1.matvec_add(h, &mut a);
        let u: Vec<f64> = a.iter().map(|v| v.tanh()).collect();
        let mut o = self.dist.b2.clone();
        self.dist.w2.matvec_add(&u, &mut o);
        (y, u, o)
    }

    /// Full forward pass over a T × input_dim row-major input matrix.
    ///
    /// h_0 = 0; both heads are evaluated at every step.
    pub fn forward(&self, inputs: &[f64], t_len: usize) -> Result<ForwardPass> {
        if t_len < 2 {
            return Err(Error::Config("forward pass needs T >= 2".into()));
        }
        if inputs.len() != t_len * self.input_dim {
            return Err(Error::Schema(format!(
                "input matrix is {} values, expected {} x {}",
                inputs.len(),
                t_len,
                self.input_dim
            )));
        }
        let d = self.hidden_dim;
        let mut states = Vec::with_capacity(t_len);
        let mut caches = Vec::with_capacity(t_len);
        let mut point = Vec::with_capacity(t_len);
        let mut dist_hidden = Vec::with_capacity(t_len);
        let mut dist_raw = Vec::with_capacity(t_len);
        let mut h_prev = vec![0.0; d];
        for t in 0..t_len {
            let x = &inputs[t * self.input_dim..(t + 1) * self.input_dim];
            let (h, cache) = self.cell_forward_cached(x, &h_prev);
            let (y, u, o) = self.heads(&h);
            point.push(y);
            dist_hidden.push(u);
            dist_raw.push(o);
            caches.push(cache);
            h_prev = h.clone();
            states.push(h);
        }
        if states
            .iter()
            .any(|h| h.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Numeric("non-finite hidden state in forward pass".into()));
        }
        Ok(ForwardPass {
            traj: HiddenTrajectory { states },
            point,
            dist_hidden,
            dist_raw,
            caches,
            n_leads: self.n_leads,
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-step cell internals kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) enum CellCache {
    Elman,
    Gru {
        z: Vec<f64>,
        r: Vec<f64>,
        c: Vec<f64>,
        rh: Vec<f64>,
    },
}

/// Hidden-state path h_1..h_T.
#[derive(Debug, Clone)]
pub struct HiddenTrajectory {
    pub states: Vec<Vec<f64>>,
}

impl HiddenTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Forward-pass products: trajectory, both heads, and backward caches.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub traj: HiddenTrajectory,
    /// T × n_leads point forecasts.
    pub point: Vec<Vec<f64>>,
    pub(crate) dist_hidden: Vec<Vec<f64>>,
    pub(crate) dist_raw: Vec<Vec<f64>>,
    pub(crate) caches: Vec<CellCache>,
    n_leads: usize,
}

impl ForwardPass {
    /// Predictive distribution at step t for lead index j.
    pub fn dist(&self, t: usize, lead: usize) -> TwoPartDist {
        let o = &self.dist_raw[t];
        let pi0 = sigmoid(o[3 * lead]);
        let mu = o[3 * lead + 1];
        let sigma = o[3 * lead + 2].exp().clamp(SIGMA_MIN, SIGMA_MAX);
        TwoPartDist { pi0, mu, sigma }
    }

    /// All predictive distributions, T × n_leads.
    pub fn dists(&self) -> Vec<Vec<TwoPartDist>> {
        (0..self.traj.len())
            .map(|t| (0..self.n_leads).map(|j| self.dist(t, j)).collect())
            .collect()
    }
}
