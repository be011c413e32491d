//! Losses, schedule, backpropagation through time, and training.
//!
//! The objective is L_task + λ_k · L_RM. L_task is the mean negative
//! log-likelihood of the two-part predictive distribution at the observed
//! precipitation, plus a small (0.1-weighted) squared-error term on the
//! point head. L_RM is the mean squared backward reconstruction error
//! of the hidden trajectory through the projector.

use crate::dist::TwoPartDist;
use crate::error::{Error, Result};
use crate::linalg::axpy;
use crate::math::LN_2PI;
use crate::rnn::model::{sigmoid, CellCache, CellParams, HiddenTrajectory, Projector, RmModel};
use crate::rnn::{SIGMA_MAX, SIGMA_MIN};

/// Weight of the auxiliary point-head squared error inside the task loss.
const POINT_AUX_WEIGHT: f64 = 0.1;

/// Training schedule and optimizer constants.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Total epochs K.
    pub epochs: usize,
    /// Warm-up epochs K0 during which λ = 0.
    pub warmup_epochs: usize,
    pub lambda0: f64,
    pub gamma: f64,
    pub lr: f64,
    pub clip_norm: f64,
    /// Sliding RM window W; 0 trains on the full sequence.
    pub rm_window: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            warmup_epochs: 5,
            lambda0: 0.1,
            gamma: 0.1,
            lr: 0.05,
            clip_norm: 5.0,
            rm_window: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        // warmup_epochs >= epochs is allowed: the whole run stays in
        // warm-up (an all-zero lambda column), like the K = K0 ablation.
        // lambda0 = 0 is the unregularized ablation and is allowed.
        if self.lambda0 < 0.0 || !self.lambda0.is_finite() {
            return Err(Error::Config(format!("lambda0 {} must be >= 0", self.lambda0)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} must be in (0, 1]", self.gamma)));
        }
        if self.lr < 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("lr must be >= 0 and clip_norm > 0".into()));
        }
        if self.rm_window == 1 {
            return Err(Error::Config("rm_window must be 0 (full) or >= 2".into()));
        }
        Ok(())
    }
}

/// λ_k: zero through warm-up, then λ0 · γ^((k−K0)/(K−K0)).
pub fn lambda_schedule(k: usize, cfg: &TrainConfig) -> f64 {
    assert!(k >= 1 && k <= cfg.epochs, "epoch {k} outside 1..={}", cfg.epochs);
    if k <= cfg.warmup_epochs {
        // Covers warmup_epochs >= epochs: the schedule never activates.
        return 0.0;
    }
    if k == cfg.epochs {
        // Exponent is exactly 1; avoid powf rounding at the endpoint.
        return cfg.lambda0 * cfg.gamma;
    }
    let frac = (k - cfg.warmup_epochs) as f64 / (cfg.epochs - cfg.warmup_epochs) as f64;
    cfg.lambda0 * cfg.gamma.powf(frac)
}

/// Mean squared backward reconstruction error over consecutive pairs:
/// (1/(T−1)) Σ_t ‖h_t − g(h_{t+1})‖².
pub fn rm_loss(traj: &HiddenTrajectory, proj: &Projector) -> f64 {
    let t = traj.len();
    assert!(t >= 2, "RM loss needs T >= 2");
    rm_pair_sum(&traj.states, proj) / (t - 1) as f64
}

/// Aggregate squared defect Q = Σ_t ‖h_t − g(h_{t+1})‖² = (T−1)·L_RM,
/// accumulated directly rather than via the mean.
pub fn rm_q_hat(traj: &HiddenTrajectory, proj: &Projector) -> f64 {
    assert!(traj.len() >= 2, "RM defect needs T >= 2");
    rm_pair_sum(&traj.states, proj)
}

/// Sliding-window RM loss over a buffer of the W most recent states.
pub fn rm_loss_windowed(buffer: &[Vec<f64>], proj: &Projector) -> Result<f64> {
    if buffer.len() < 2 {
        return Err(Error::Config(format!(
            "windowed RM loss needs a buffer of >= 2 states, got {}",
            buffer.len()
        )));
    }
    Ok(rm_pair_sum(buffer, proj) / (buffer.len() - 1) as f64)
}

fn rm_pair_sum(states: &[Vec<f64>], proj: &Projector) -> f64 {
    let mut sum = 0.0;
    for i in 0..states.len() - 1 {
        let g = proj.apply(&states[i + 1]);
        sum += states[i]
            .iter()
            .zip(g.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    sum
}

/// Per-lead forecast targets aligned to forecast issue steps.
///
/// `per_lead[j][t]` is the observed target for the forecast issued at
/// step t for lead `j`; `None` where the target is missing, out of
/// range, or excluded from the loss.
#[derive(Debug, Clone)]
pub struct LeadTargets {
    pub per_lead: Vec<Vec<Option<f64>>>,
}

impl LeadTargets {
    /// Builds targets from a raw target series (e.g. precipitation in mm).
    /// `include` optionally restricts which target steps contribute.
    pub fn from_series(
        values: &[f64],
        observed: &[bool],
        include: Option<&[bool]>,
        lead_steps: &[usize],
    ) -> Self {
        let t_len = values.len();
        let per_lead = lead_steps
            .iter()
            .map(|&lead| {
                (0..t_len)
                    .map(|t| {
                        let idx = t.checked_add(lead)?;
                        if idx >= t_len || !observed[idx] {
                            return None;
                        }
                        if let Some(inc) = include {
                            if !inc[idx] {
                                return None;
                            }
                        }
                        Some(values[idx])
                    })
                    .collect()
            })
            .collect();
        LeadTargets { per_lead }
    }

    pub fn n_leads(&self) -> usize {
        self.per_lead.len()
    }

    pub fn n_contributing(&self) -> usize {
        self.per_lead
            .iter()
            .map(|v| v.iter().filter(|x| x.is_some()).count())
            .sum()
    }
}

/// Mean negative log-likelihood of the two-part distribution at the
/// observed targets; masked entries are skipped.
pub fn task_loss(dists: &[Vec<TwoPartDist>], targets: &LeadTargets) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (j, lead) in targets.per_lead.iter().enumerate() {
        for (t, tau) in lead.iter().enumerate() {
            if let Some(tau) = tau {
                sum += -dists[t][j].log_density(*tau);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyBatch("no observed targets in task loss".into()));
    }
    Ok(sum / n as f64)
}

/// One epoch's logged losses.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub task_loss: f64,
    pub rm_loss: f64,
    pub lambda: f64,
}

/// RM pair range and normalizer for a trajectory of length `t_len` under
/// window W (0 = full sequence).
fn rm_range(t_len: usize, window: usize) -> (usize, f64) {
    if window == 0 {
        (0, (t_len - 1) as f64)
    } else {
        let n_states = window.min(t_len);
        (t_len - n_states, (n_states - 1) as f64)
    }
}

/// Combined objective (task + λ·RM) with the exact normalization used by
/// training; shared by the finite-difference check.
fn total_loss(
    model: &RmModel,
    inputs: &[f64],
    t_len: usize,
    targets: &LeadTargets,
    lambda: f64,
    rm_window: usize,
) -> Result<f64> {
    let fp = model.forward(inputs, t_len)?;
    let (task, rm) = losses_from_forward(model, &fp, targets, rm_window)?;
    Ok(task + lambda * rm)
}

fn losses_from_forward(
    model: &RmModel,
    fp: &crate::rnn::ForwardPass,
    targets: &LeadTargets,
    rm_window: usize,
) -> Result<(f64, f64)> {
    let t_len = fp.traj.len();
    let mut task_sum = 0.0;
    let mut n = 0usize;
    for (j, lead) in targets.per_lead.iter().enumerate() {
        for (t, tau) in lead.iter().enumerate() {
            if let Some(tau) = tau {
                let d = fp.dist(t, j);
                task_sum += -d.log_density(*tau);
                task_sum += POINT_AUX_WEIGHT * (fp.point[t][j] - tau).powi(2);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyBatch("no observed targets".into()));
    }
    let (start, denom) = rm_range(t_len, rm_window);
    let rm = rm_pair_sum(&fp.traj.states[start..], &model.proj) / denom;
    Ok((task_sum / n as f64, rm))
}

/// Backpropagation through time for the combined objective.
///
/// Returns (gradients, task loss, RM loss). Gradients are stored in a
/// zero-initialized model of the same shape.
fn backprop(
    model: &RmModel,
    inputs: &[f64],
    t_len: usize,
    targets: &LeadTargets,
    lambda: f64,
    rm_window: usize,
) -> Result<(RmModel, f64, f64)> {
    if targets.n_leads() != model.n_leads {
        return Err(Error::Config(format!(
            "targets carry {} leads, model has {}",
            targets.n_leads(),
            model.n_leads
        )));
    }
    let fp = model.forward(inputs, t_len)?;
    let d = model.hidden_dim;
    let l = model.n_leads;
    let mut grads = model.zeros_like();
    let mut dh = vec![vec![0.0; d]; t_len];

    // Head contributions.
    let n_contrib: usize = targets.n_contributing();
    if n_contrib == 0 {
        return Err(Error::EmptyBatch("no observed targets".into()));
    }
    let inv = 1.0 / n_contrib as f64;
    let mut task_sum = 0.0;
    for t in 0..t_len {
        let h_t = &fp.traj.states[t];
        let mut dy = vec![0.0; l];
        let mut d_o = vec![0.0; 3 * l];
        let mut any = false;
        for j in 0..l {
            let Some(tau) = targets.per_lead[j][t] else {
                continue;
            };
            any = true;
            let y = fp.point[t][j];
            task_sum += POINT_AUX_WEIGHT * (y - tau) * (y - tau);
            dy[j] = 2.0 * POINT_AUX_WEIGHT * (y - tau) * inv;
            let o = &fp.dist_raw[t];
            let pi0 = sigmoid(o[3 * j]);
            if tau == 0.0 {
                task_sum += -pi0.max(1e-300).ln();
                d_o[3 * j] = -(1.0 - pi0) * inv;
            } else {
                let sigma_raw = o[3 * j + 2].exp();
                let clamped = !(SIGMA_MIN..=SIGMA_MAX).contains(&sigma_raw);
                let sigma = sigma_raw.clamp(SIGMA_MIN, SIGMA_MAX);
                let lt = tau.ln();
                let z = (lt - o[3 * j + 1]) / sigma;
                task_sum +=
                    -(1.0 - pi0).max(1e-300).ln() + lt + sigma.ln() + 0.5 * LN_2PI + 0.5 * z * z;
                d_o[3 * j] = pi0 * inv;
                d_o[3 * j + 1] = -z / sigma * inv;
                d_o[3 * j + 2] = if clamped { 0.0 } else { (1.0 - z * z) * inv };
            }
        }
        if !any {
            continue;
        }
        // Point head.
        grads.point.w.outer_add(&dy, h_t, 1.0);
        axpy(1.0, &dy, &mut grads.point.b);
        model.point.w.tvec_add(&dy, &mut dh[t]);
        // Distribution head (two-layer, tanh hidden).
        let u = &fp.dist_hidden[t];
        grads.dist.w2.outer_add(&d_o, u, 1.0);
        axpy(1.0, &d_o, &mut grads.dist.b2);
        let mut du = vec![0.0; d];
        model.dist.w2.tvec_add(&d_o, &mut du);
        for (dui, ui) in du.iter_mut().zip(u.iter()) {
            *dui *= 1.0 - ui * ui;
        }
        grads.dist.w1.outer_add(&du, h_t, 1.0);
        axpy(1.0, &du, &mut grads.dist.b1);
        model.dist.w1.tvec_add(&du, &mut dh[t]);
    }
    let task_val = task_sum * inv;

    // RM term over the pair range.
    let (pair_start, denom) = rm_range(t_len, rm_window);
    let mut rm_sum = 0.0;
    {
        let s = 2.0 * lambda / denom;
        for i in pair_start..t_len - 1 {
            let h_next = &fp.traj.states[i + 1];
            let (g, a) = model.proj.apply_cached(h_next);
            let e: Vec<f64> = fp.traj.states[i]
                .iter()
                .zip(g.iter())
                .map(|(x, y)| x - y)
                .collect();
            rm_sum += e.iter().map(|v| v * v).sum::<f64>();
            if lambda == 0.0 {
                continue;
            }
            axpy(s, &e, &mut dh[i]);
            // Through the projector Jacobian: Jᵀe = e + W1ᵀ(mask ∘ W2ᵀe).
            let mut w2te = vec![0.0; d];
            model.proj.w2.tvec_add(&e, &mut w2te);
            let v: Vec<f64> = w2te
                .iter()
                .zip(a.iter())
                .map(|(w, ai)| if *ai > 0.0 { *w } else { 0.0 })
                .collect();
            axpy(-s, &e, &mut dh[i + 1]);
            let mut w1tv = vec![0.0; d];
            model.proj.w1.tvec_add(&v, &mut w1tv);
            axpy(-s, &w1tv, &mut dh[i + 1]);
            // Projector parameter gradients.
            let relu: Vec<f64> = a.iter().map(|x| x.max(0.0)).collect();
            grads.proj.w2.outer_add(&e, &relu, -s);
            axpy(-s, &e, &mut grads.proj.b2);
            grads.proj.w1.outer_add(&v, h_next, -s);
            axpy(-s, &v, &mut grads.proj.b1);
        }
    }
    let rm_val = rm_sum / denom;

    // Backward through the recurrent cell.
    let zero_h = vec![0.0; d];
    for t in (0..t_len).rev() {
        let gt = std::mem::take(&mut dh[t]);
        let x = &inputs[t * model.input_dim..(t + 1) * model.input_dim];
        let h_prev = if t > 0 { &fp.traj.states[t - 1] } else { &zero_h };
        match (&model.cell, &mut grads.cell, &fp.caches[t]) {
            (
                CellParams::Elman { w_h, .. },
                CellParams::Elman {
                    w_x: gw_x,
                    w_h: gw_h,
                    b: gb,
                },
                CellCache::Elman,
            ) => {
                let h_t = &fp.traj.states[t];
                let da: Vec<f64> = gt
                    .iter()
                    .zip(h_t.iter())
                    .map(|(g, h)| g * (1.0 - h * h))
                    .collect();
                gw_x.outer_add(&da, x, 1.0);
                gw_h.outer_add(&da, h_prev, 1.0);
                axpy(1.0, &da, gb);
                if t > 0 {
                    w_h.tvec_add(&da, &mut dh[t - 1]);
                }
            }
            (
                CellParams::Gru {
                    u_z, u_r, u_c, ..
                },
                CellParams::Gru {
                    w_z: gw_z,
                    u_z: gu_z,
                    b_z: gb_z,
                    w_r: gw_r,
                    u_r: gu_r,
                    b_r: gb_r,
                    w_c: gw_c,
                    u_c: gu_c,
                    b_c: gb_c,
                },
                CellCache::Gru { z, r, c, rh },
            ) => {
                let mut dhp = vec![0.0; d];
                let mut dz = vec![0.0; d];
                let mut dc = vec![0.0; d];
                for i in 0..d {
                    dz[i] = gt[i] * (c[i] - h_prev[i]);
                    dc[i] = gt[i] * z[i];
                    dhp[i] = gt[i] * (1.0 - z[i]);
                }
                let dac: Vec<f64> = dc
                    .iter()
                    .zip(c.iter())
                    .map(|(g, ci)| g * (1.0 - ci * ci))
                    .collect();
                gw_c.outer_add(&dac, x, 1.0);
                gu_c.outer_add(&dac, rh, 1.0);
                axpy(1.0, &dac, gb_c);
                let mut drh = vec![0.0; d];
                u_c.tvec_add(&dac, &mut drh);
                let mut dr = vec![0.0; d];
                for i in 0..d {
                    dr[i] = drh[i] * h_prev[i];
                    dhp[i] += drh[i] * r[i];
                }
                let daz: Vec<f64> = dz
                    .iter()
                    .zip(z.iter())
                    .map(|(g, zi)| g * zi * (1.0 - zi))
                    .collect();
                gw_z.outer_add(&daz, x, 1.0);
                gu_z.outer_add(&daz, h_prev, 1.0);
                axpy(1.0, &daz, gb_z);
                u_z.tvec_add(&daz, &mut dhp);
                let dar: Vec<f64> = dr
                    .iter()
                    .zip(r.iter())
                    .map(|(g, ri)| g * ri * (1.0 - ri))
                    .collect();
                gw_r.outer_add(&dar, x, 1.0);
                gu_r.outer_add(&dar, h_prev, 1.0);
                axpy(1.0, &dar, gb_r);
                u_r.tvec_add(&dar, &mut dhp);
                if t > 0 {
                    axpy(1.0, &dhp, &mut dh[t - 1]);
                }
            }
            _ => unreachable!("cell/cache kind mismatch"),
        }
    }
    Ok((grads, task_val, rm_val))
}

/// Trains by full-sequence gradient descent with per-sequence global
/// gradient-norm clipping. Deterministic given the initial model.
pub fn train(
    mut model: RmModel,
    inputs: &[f64],
    t_len: usize,
    targets: &LeadTargets,
    cfg: &TrainConfig,
) -> Result<(RmModel, Vec<EpochLog>)> {
    cfg.validate()?;
    let mut log = Vec::with_capacity(cfg.epochs);
    for k in 1..=cfg.epochs {
        let lambda = lambda_schedule(k, cfg);
        let (grads, task, rm) = backprop(&model, inputs, t_len, targets, lambda, cfg.rm_window)
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Training { epoch: k, msg },
                other => other,
            })?;
        if !task.is_finite() || !rm.is_finite() {
            return Err(Error::Training {
                epoch: k,
                msg: format!("non-finite loss (task={task}, rm={rm})"),
            });
        }
        let mut gflat = grads.flatten();
        let norm = gflat.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Training {
                epoch: k,
                msg: "non-finite gradient".into(),
            });
        }
        if norm > cfg.clip_norm {
            let scale = cfg.clip_norm / norm;
            gflat.iter_mut().for_each(|g| *g *= scale);
        }
        let mut pflat = model.flatten();
        for (p, g) in pflat.iter_mut().zip(gflat.iter()) {
            *p -= cfg.lr * g;
        }
        model.assign_flat(&pflat);
        log.push(EpochLog {
            epoch: k,
            task_loss: task,
            rm_loss: rm,
            lambda,
        });
    }
    Ok((model, log))
}

/// Compares analytic BPTT gradients against central finite differences
/// over every parameter; returns the max relative error.
///
/// Kept tractable by requiring d ≤ 8 and T ≤ 12.
pub fn gradient_check(
    model: &RmModel,
    inputs: &[f64],
    t_len: usize,
    targets: &LeadTargets,
    lambda: f64,
    rm_window: usize,
) -> Result<f64> {
    if model.hidden_dim > 8 || t_len > 12 {
        return Err(Error::Config(
            "gradient check requires d <= 8 and T <= 12".into(),
        ));
    }
    let (grads, _, _) = backprop(model, inputs, t_len, targets, lambda, rm_window)?;
    let analytic = grads.flatten();
    let base = model.flatten();
    let mut work = model.clone();
    let eps = 1e-5;
    let mut max_rel: f64 = 0.0;
    let mut flat = base.clone();
    for i in 0..base.len() {
        flat[i] = base[i] + eps;
        work.assign_flat(&flat);
        let lp = total_loss(&work, inputs, t_len, targets, lambda, rm_window)?;
        flat[i] = base[i] - eps;
        work.assign_flat(&flat);
        let lm = total_loss(&work, inputs, t_len, targets, lambda, rm_window)?;
        flat[i] = base[i];
        let numeric = (lp - lm) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs());
        if denom > 1e-7 {
            max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
        }
    }
    work.assign_flat(&base);
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rnn::CellKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(epochs: usize, lambda0: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            warmup_epochs: 5,
            lambda0,
            gamma: 0.1,
            lr: 0.05,
            clip_norm: 5.0,
            rm_window: 0,
            seed: 0,
        }
    }

    /// Small synthetic training problem: one rain-like channel plus its
    /// mask; the target has real structure for the heads to learn.
    fn fixture(t_len: usize, seed: u64) -> (Vec<f64>, usize, LeadTargets) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut precip = Vec::with_capacity(t_len);
        let mut wet = false;
        for _ in 0..t_len {
            let p_wet = if wet { 0.6 } else { 0.25 };
            wet = rng.gen::<f64>() < p_wet;
            precip.push(if wet {
                (0.8 + 0.6 * rng.gen::<f64>()).exp()
            } else {
                0.0
            });
        }
        let dim = 2;
        let mut inputs = Vec::with_capacity(t_len * dim);
        let mean = crate::math::mean(&precip);
        let sd = crate::math::sample_sd(&precip);
        for p in &precip {
            inputs.push((p - mean) / sd);
            inputs.push(1.0);
        }
        let observed = vec![true; t_len];
        let targets = LeadTargets::from_series(&precip, &observed, None, &[1]);
        (inputs, t_len, targets)
    }

    #[test]
    fn lambda_schedule_endpoints_and_midpoint() {
        let c = cfg(30, 0.1);
        for k in 1..=5 {
            assert_eq!(lambda_schedule(k, &c), 0.0);
        }
        assert!((lambda_schedule(30, &c) - 0.01).abs() <= 1e-15);
        // Midpoint of the decay: lambda0 * gamma^0.5.
        let c2 = cfg(15, 0.1); // K0 = 5, K = 15, midpoint at k = 10
        let mid = lambda_schedule(10, &c2);
        assert!((mid - 0.1 * 0.1f64.sqrt()).abs() < 1e-12);
        assert!((mid - 0.031623).abs() < 1e-6);
        // Non-increasing for gamma <= 1.
        let mut prev = f64::INFINITY;
        for k in 6..=30 {
            let l = lambda_schedule(k, &c);
            assert!(l <= prev + 1e-15);
            prev = l;
        }
    }

    fn identity_proj(d: usize) -> Projector {
        Projector {
            w1: crate::linalg::Mat::zeros(d, d),
            b1: vec![0.0; d],
            w2: crate::linalg::Mat::zeros(d, d),
            b2: vec![0.0; d],
        }
    }

    #[test]
    fn rm_loss_constant_trajectory_is_zero() {
        let traj = HiddenTrajectory {
            states: vec![vec![0.4, -0.6]; 9],
        };
        assert_eq!(rm_loss(&traj, &identity_proj(2)), 0.0);
    }

    #[test]
    fn rm_loss_hand_sum() {
        let traj = HiddenTrajectory {
            states: vec![vec![0.0], vec![1.0], vec![0.0]],
        };
        assert!((rm_loss(&traj, &identity_proj(1)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rm_loss_matches_naive_double_loop_and_q_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 4;
        let t = 37;
        let states: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let model = RmModel::new(CellKind::Elman, 2, d, 1, 3).unwrap();
        let mut proj = model.proj.clone();
        // Random residual branch.
        proj.w2.data.iter_mut().for_each(|v| *v = rng.gen::<f64>() - 0.5);
        proj.b2.iter_mut().for_each(|v| *v = rng.gen::<f64>() - 0.5);
        let traj = HiddenTrajectory { states: states.clone() };
        let got = rm_loss(&traj, &proj);
        // Naive summation oracle.
        let mut acc = 0.0;
        for i in 0..t - 1 {
            let g = proj.apply(&states[i + 1]);
            for k in 0..d {
                let e = states[i][k] - g[k];
                acc += e * e;
            }
        }
        let naive = acc / (t - 1) as f64;
        assert!((got - naive).abs() < 1e-12);
        let q = rm_q_hat(&traj, &proj);
        let rel = (q - (t - 1) as f64 * got).abs() / q.max(1e-300);
        assert!(rel < 1e-12, "Q-hat identity violated: {rel}");
    }

    #[test]
    fn rm_loss_zero_iff_projector_reproduces_pairs() {
        // Forward direction: construct h_t = g(h_{t+1}) exactly.
        let d = 3;
        let model = RmModel::new(CellKind::Elman, 2, d, 1, 8).unwrap();
        let mut proj = model.proj.clone();
        proj.w2.data.iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * (i as f64 - 4.0));
        proj.b2 = vec![0.01, -0.02, 0.03];
        let mut states = vec![vec![0.2, -0.1, 0.4]];
        for _ in 0..5 {
            let next = states.last().unwrap().clone();
            // choose h_t = g(h_{t+1}) by building the list backward
            states.push(next);
        }
        // Build backward-coherent path: h[i] = g(h[i+1]).
        let mut coherent = vec![vec![0.0; d]; 6];
        coherent[5] = vec![0.3, 0.7, -0.2];
        for i in (0..5).rev() {
            let next = coherent[i + 1].clone();
            coherent[i] = proj.apply(&next);
        }
        let traj = HiddenTrajectory { states: coherent };
        assert!(rm_loss(&traj, &proj) < 1e-28);
        // Reverse direction: any pair deviation makes it strictly positive.
        let mut broken = traj.states.clone();
        broken[2][1] += 1e-3;
        let traj2 = HiddenTrajectory { states: broken };
        assert!(rm_loss(&traj2, &proj) > 0.0);
    }

    #[test]
    fn windowed_rm_loss_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let d = 3;
        let t = 2000;
        let states: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..d).map(|_| rng.gen::<f64>() - 0.5).collect())
            .collect();
        let model = RmModel::new(CellKind::Elman, 2, d, 1, 12).unwrap();
        let mut proj = model.proj.clone();
        proj.w2.data.iter_mut().for_each(|v| *v = rng.gen::<f64>() * 0.2);
        let traj = HiddenTrajectory { states: states.clone() };
        // W = T coincides with the full loss.
        let full = rm_loss(&traj, &proj);
        let all = rm_loss_windowed(&states, &proj).unwrap();
        assert!((full - all).abs() < 1e-12);
        // W = 2 is the single-pair defect.
        let last2 = rm_loss_windowed(&states[t - 2..], &proj).unwrap();
        let g = proj.apply(&states[t - 1]);
        let pair: f64 = states[t - 2]
            .iter()
            .zip(g.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!((last2 - pair).abs() < 1e-12);
        // W = 168 equals the restricted naive sum over the last 168 states.
        let w = 168;
        let windowed = rm_loss_windowed(&states[t - w..], &proj).unwrap();
        let mut acc = 0.0;
        for i in t - w..t - 1 {
            let g = proj.apply(&states[i + 1]);
            acc += states[i]
                .iter()
                .zip(g.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        assert!((windowed - acc / (w - 1) as f64).abs() < 1e-12);
        assert!(rm_loss_windowed(&states[t - 1..], &proj).is_err());
    }

    #[test]
    fn task_loss_dry_certain_and_fifty_fifty() {
        let dry_sure = TwoPartDist {
            pi0: 1.0,
            mu: 0.0,
            sigma: 1.0,
        };
        let coin = TwoPartDist {
            pi0: 0.5,
            mu: 0.0,
            sigma: 1.0,
        };
        let targets = LeadTargets {
            per_lead: vec![vec![Some(0.0)]],
        };
        let v = task_loss(&[vec![dry_sure]], &targets).unwrap();
        assert!(v.abs() < 1e-12);
        let v = task_loss(&[vec![coin]], &targets).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn task_loss_wet_matches_density_formula() {
        let d = TwoPartDist {
            pi0: 0.2,
            mu: 0.4,
            sigma: 0.9,
        };
        let y = 3.7;
        let targets = LeadTargets {
            per_lead: vec![vec![Some(y)]],
        };
        let got = task_loss(&[vec![d]], &targets).unwrap();
        // Independent log-density evaluation.
        let z = (y.ln() - 0.4) / 0.9;
        let dens = (1.0 - 0.2) / (y * 0.9 * (2.0 * std::f64::consts::PI).sqrt())
            * (-0.5 * z * z).exp();
        assert!((got + dens.ln()).abs() < 1e-10);
        // All-masked batch errors.
        let empty = LeadTargets {
            per_lead: vec![vec![None]],
        };
        assert!(task_loss(&[vec![d]], &empty).is_err());
    }

    #[test]
    fn gradients_match_finite_differences_both_cells() {
        for kind in [CellKind::Elman, CellKind::Gru] {
            let (inputs, t_len, targets) = fixture(10, 77);
            let model = RmModel::new(kind, 2, 5, 1, 123).unwrap();
            for lambda in [0.0, 0.1] {
                let err = gradient_check(&model, &inputs, t_len, &targets, lambda, 0).unwrap();
                assert!(
                    err < 1e-4,
                    "{:?} lambda={lambda}: max rel grad error {err}",
                    kind
                );
            }
            // Windowed RM also has exact gradients.
            let err = gradient_check(&model, &inputs, t_len, &targets, 0.1, 4).unwrap();
            assert!(err < 1e-4, "windowed: {err}");
        }
    }

    #[test]
    fn gradient_check_zero_model_is_finite() {
        let (inputs, t_len, targets) = fixture(8, 3);
        let mut model = RmModel::new(CellKind::Elman, 2, 3, 1, 1).unwrap();
        let zeros = vec![0.0; model.n_params()];
        model.assign_flat(&zeros);
        let err = gradient_check(&model, &inputs, t_len, &targets, 0.1, 0).unwrap();
        assert!(err.is_finite());
        assert!(err < 1e-4, "zero model at tanh origin: {err}");
    }

    #[test]
    fn warmup_epochs_match_unregularized_run() {
        let (inputs, t_len, targets) = fixture(60, 41);
        let m0 = RmModel::new(CellKind::Elman, 2, 6, 1, 9).unwrap();
        let (_, log_reg) = train(m0.clone(), &inputs, t_len, &targets, &cfg(12, 0.1)).unwrap();
        let (_, log_off) = train(m0, &inputs, t_len, &targets, &cfg(12, 0.0)).unwrap();
        for k in 0..5 {
            assert_eq!(log_reg[k].task_loss, log_off[k].task_loss);
            assert_eq!(log_reg[k].lambda, 0.0);
        }
        // With lambda0 = 0 the whole trajectory is the unregularized one:
        // every lambda is 0 and the projector never moves.
        assert!(log_off.iter().all(|e| e.lambda == 0.0));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (inputs, t_len, targets) = fixture(30, 4);
        let model = RmModel::new(CellKind::Gru, 2, 4, 1, 10).unwrap();
        let before = model.flatten();
        let mut c = cfg(6, 0.1);
        c.lr = 0.0;
        let (after, _) = train(model, &inputs, t_len, &targets, &c).unwrap();
        assert_eq!(after.flatten(), before);
    }

    #[test]
    fn rm_loss_decreases_after_warmup() {
        let (inputs, t_len, targets) = fixture(200, 8);
        let model = RmModel::new(CellKind::Elman, 2, 8, 1, 21).unwrap();
        let c = cfg(30, 0.1);
        let (_, log) = train(model, &inputs, t_len, &targets, &c).unwrap();
        let at_activation = log[5].rm_loss; // epoch K0 + 1
        let final_rm = log[29].rm_loss;
        assert!(
            final_rm < at_activation,
            "coherence not learned: {final_rm} vs {at_activation}"
        );
    }

    #[test]
    fn training_is_bitwise_deterministic_per_seed() {
        let (inputs, t_len, targets) = fixture(80, 15);
        let c = cfg(10, 0.1);
        let run = || {
            let m = RmModel::new(CellKind::Gru, 2, 5, 1, 2024).unwrap();
            let (trained, _) = train(m, &inputs, t_len, &targets, &c).unwrap();
            trained.flatten()
        };
        assert_eq!(run(), run());
    }
}
