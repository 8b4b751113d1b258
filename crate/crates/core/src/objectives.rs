//! Unlearning losses and the hypernetwork training loop.
//!
//! Each iteration uses two independent graphs. The first differentiates the
//! task loss with respect to a detached copy of `θ_s` to get the target step.
//! The second holds the hypernetwork passes and treats that step as a
//! constant, so no second-order terms are ever formed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::concepts::{sample_data_with, Concept, ConceptSet};
use crate::diffusion::{AdapterVars, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::hypernet::Hypernet;
use crate::lora::{LoraParams, LoraSpec};
use crate::nn::LinearVars;
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

/// `unlearn` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnConfig {
    pub gamma: f64,
    pub eta: f64,
    pub lambda_remove: f64,
    pub lambda_retain: f64,
    pub steps: usize,
    pub batch: usize,
    pub retain_batch: usize,
    pub adam: AdamConfig,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            eta: 1e-3,
            lambda_remove: 1.0,
            lambda_retain: 1.0,
            steps: 300,
            batch: 64,
            retain_batch: 16,
            adam: AdamConfig::default(),
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("lambda_remove", self.lambda_remove),
            ("lambda_retain", self.lambda_retain),
            ("adam.lr", self.adam.lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "unlearn.{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.batch == 0 || self.retain_batch == 0 {
            return Err(Error::Config("unlearn batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Noisy points `z_t` with their timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub zt: Tensor,
    pub t: Vec<usize>,
}

impl TaskBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// `z_0` from the concept's data, `t ~ U{1..T}`, closed-form forward jump.
pub fn sample_task_batch(
    concept: &Concept,
    schedule: &NoiseSchedule,
    n: usize,
    rng: &mut impl Rng,
) -> Result<TaskBatch> {
    let z0 = sample_data_with(concept, n, rng);
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = Tensor::new(vec![n, 2], rng::normals(rng, 2 * n))?;
    let zt = schedule.forward_diffuse(&z0, &t, &eps)?;
    Ok(TaskBatch { zt, t })
}

/// `ε(c_m) − γ·(ε(c) − ε(c_m))` on the frozen base model.
pub fn epsilon_target(base: &Denoiser, batch: &TaskBatch, c: &[f64], c_m: &[f64], gamma: f64) -> Result<Tensor> {
    let n = batch.len();
    let e_m = base.predict(None, &batch.zt, &batch.t, &Tensor::repeat_rows(c_m, n))?;
    if gamma == 0.0 {
        return Ok(e_m);
    }
    let e_c = base.predict(None, &batch.zt, &batch.t, &Tensor::repeat_rows(c, n))?;
    Ok(e_m.zip_map(&e_c, "epsilon_target", |m, c| m - gamma * (c - m))?)
}

/// Task loss against a precomputed target, plus its gradient with respect to
/// the flat `θ`.
pub fn task_loss_grad(
    base: &Denoiser,
    spec: &LoraSpec,
    theta: &LoraParams,
    batch: &TaskBatch,
    c: &[f64],
    target: &Tensor,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("task loss needs a non-empty batch"));
    }
    let mut g = Graph::new();
    let vars = base.bind(&mut g, false);
    let adapter = AdapterVars::bind(&mut g, spec, theta, true)?;
    let c = Tensor::repeat_rows(c, batch.len());
    let pred = base.forward(&mut g, &vars, Some(&adapter), &batch.zt, &batch.t, &c)?;
    let tgt = g.constant(target.clone());
    let loss = g.mse(pred, tgt)?;
    let grads = g.backward(loss)?;
    let mut flat = Vec::with_capacity(crate::lora::param_count(spec));
    for &(a, b) in &adapter.pairs {
        flat.extend_from_slice(grads.get_or_zeros(&g, a)?.data());
        flat.extend_from_slice(grads.get_or_zeros(&g, b)?.data());
    }
    Ok((g.value(loss).item(), flat))
}

/// Mean-square error between the adapted prediction for `c` and `ε_target`.
#[allow(clippy::too_many_arguments)]
pub fn task_loss(
    base: &Denoiser,
    spec: &LoraSpec,
    theta: &LoraParams,
    batch: &TaskBatch,
    c: &[f64],
    c_m: &[f64],
    gamma: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("task loss needs a non-empty batch"));
    }
    let target = epsilon_target(base, batch, c, c_m, gamma)?;
    let pred = base.predict(
        Some((spec, theta)),
        &batch.zt,
        &batch.t,
        &Tensor::repeat_rows(c, batch.len()),
    )?;
    let mut g = Graph::new();
    let (p, t) = (g.constant(pred), g.constant(target));
    let loss = g.mse(p, t)?;
    Ok(g.value(loss).item())
}

/// `Δθ_task = −η·∇_θ L_task`, detached.
#[allow(clippy::too_many_arguments)]
pub fn target_step(
    base: &Denoiser,
    spec: &LoraSpec,
    theta: &LoraParams,
    batch: &TaskBatch,
    c: &[f64],
    c_m: &[f64],
    gamma: f64,
    eta: f64,
) -> Result<Vec<f64>> {
    let target = epsilon_target(base, batch, c, c_m, gamma)?;
    let (_, grad) = task_loss_grad(base, spec, theta, batch, c, &target)?;
    Ok(grad.into_iter().map(|g| -eta * g).collect())
}

fn check_step(h: &Hypernet, s: usize) -> Result<()> {
    if s >= h.trajectory_len() {
        return Err(Error::invalid(format!(
            "predicted step needs s < S = {}, got {s}",
            h.trajectory_len()
        )));
    }
    Ok(())
}

/// Graph form of `H(c, s+1) − H(c, s)` as a `1×P` row.
pub fn predicted_step_graph(h: &Hypernet, g: &mut Graph, vars: &[LinearVars], c: &[f64], s: usize) -> Result<Var> {
    check_step(h, s)?;
    let c = Tensor::repeat_rows(c, 1);
    let next = h.field_graph(g, vars, &c, &[s + 1])?;
    let here = h.field_graph(g, vars, &c, &[s])?;
    Ok(g.sub(next, here)?)
}

pub fn predicted_step(h: &Hypernet, c: &[f64], s: usize) -> Result<Vec<f64>> {
    check_step(h, s)?;
    let next = h.predict_flat(c, s + 1)?;
    let here = h.predict_flat(c, s)?;
    Ok(next.iter().zip(&here).map(|(a, b)| a - b).collect())
}

/// Graph form of `‖Δθ_pred − Δθ_task‖²` with the target step held constant.
pub fn removal_loss_graph(
    h: &Hypernet,
    g: &mut Graph,
    vars: &[LinearVars],
    c: &[f64],
    s: usize,
    target_step: &[f64],
) -> Result<Var> {
    let pred = predicted_step_graph(h, g, vars, c, s)?;
    let tgt = g.constant(Tensor::new(vec![1, target_step.len()], target_step.to_vec())?);
    let resid = g.sub(pred, tgt)?;
    Ok(g.sum_sq(resid)?)
}

/// Removal loss value at step `s` of the field for `c` redirected to `c_m`.
#[allow(clippy::too_many_arguments)]
pub fn removal_loss(
    h: &Hypernet,
    base: &Denoiser,
    c: &[f64],
    c_m: &[f64],
    s: usize,
    batch: &TaskBatch,
    cfg: &UnlearnConfig,
) -> Result<f64> {
    let theta = h.predict(c, s)?;
    let step = target_step(base, h.spec(), &theta, batch, c, c_m, cfg.gamma, cfg.eta)?;
    let pred = predicted_step(h, c, s)?;
    Ok(pred.iter().zip(&step).map(|(p, t)| (p - t).powi(2)).sum())
}

/// Graph form of the mean over rows of `‖H(c_i, s_i) − H(c_i, 0)‖²`.
pub fn retention_loss_graph(h: &Hypernet, g: &mut Graph, vars: &[LinearVars], c: &Tensor, s: &[usize]) -> Result<Var> {
    let mut f = h.field_graph(g, vars, c, s)?;
    if !h.config().zero_anchor {
        let f0 = h.field_graph(g, vars, c, &vec![0; s.len()])?;
        f = g.sub(f, f0)?;
    }
    let total = g.sum_sq(f)?;
    Ok(g.scale(total, 1.0 / s.len().max(1) as f64)?)
}

pub fn retention_loss(h: &Hypernet, c_retain: &[f64], s: usize) -> Result<f64> {
    let here = h.predict_flat(c_retain, s)?;
    let origin = h.predict_flat(c_retain, 0)?;
    Ok(here.iter().zip(&origin).map(|(a, b)| (a - b).powi(2)).sum())
}

pub fn final_loss(remove: f64, retain: f64, lambda_remove: f64, lambda_retain: f64) -> f64 {
    lambda_remove * remove + lambda_retain * retain
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub l_remove: f64,
    pub l_retain: f64,
    pub l_final: f64,
}

/// Trains `h` in place against the frozen `base`. Deterministic given `seed`.
pub fn train_hypernet(
    h: &mut Hypernet,
    base: &Denoiser,
    schedule: &NoiseSchedule,
    concepts: &ConceptSet,
    cfg: &UnlearnConfig,
    seed: u64,
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    let forget = concepts.forget_training();
    let retain = concepts.retain_training();
    if forget.is_empty() || concepts.pairs.is_empty() {
        return Err(Error::invalid("unlearning needs at least one forget pair"));
    }
    if retain.is_empty() {
        return Err(Error::invalid("unlearning needs at least one retained concept"));
    }
    let big_s = h.trajectory_len();
    let mut rng = rng::stream(seed, "unlearn/train");
    let mut adam = AdamState::new(cfg.adam);
    let mut trace = Vec::with_capacity(cfg.steps);
    for iter in 0..cfg.steps {
        let concept = forget[rng.random_range(0..forget.len())];
        let pair = concepts
            .pair_for(concept.base_id())
            .ok_or_else(|| Error::invalid(format!("forget concept {} has no mapping", concept.base_id())))?;
        let c = concept.embedding.as_slice();
        let c_m = concepts.get(pair.mapping)?.embedding.as_slice();
        let s = rng.random_range(0..big_s);
        let batch = sample_task_batch(concept, schedule, cfg.batch, &mut rng)?;
        let retain_rows: Vec<&Concept> = (0..cfg.retain_batch)
            .map(|_| retain[rng.random_range(0..retain.len())])
            .collect();
        let retain_s: Vec<usize> = (0..cfg.retain_batch).map(|_| rng.random_range(0..=big_s)).collect();

        // Pass 1: target step on a detached copy of θ_s.
        let theta = h.predict(c, s)?;
        let step = target_step(base, h.spec(), &theta, &batch, c, c_m, cfg.gamma, cfg.eta)?;

        // Pass 2: gradient of the final loss with respect to φ.
        let mut g = Graph::new();
        let vars = h.bind(&mut g, true);
        let l_remove = removal_loss_graph(h, &mut g, &vars, c, s, &step)?;
        let rc = Tensor::new(
            vec![retain_rows.len(), concepts.embed_dim],
            retain_rows.iter().flat_map(|r| r.embedding.iter().copied()).collect(),
        )?;
        let l_retain = retention_loss_graph(h, &mut g, &vars, &rc, &retain_s)?;
        let a = g.scale(l_remove, cfg.lambda_remove)?;
        let b = g.scale(l_retain, cfg.lambda_retain)?;
        let l_final = g.add(a, b)?;
        trace.push(TraceRow {
            iter,
            l_remove: g.value(l_remove).item(),
            l_retain: g.value(l_retain).item(),
            l_final: g.value(l_final).item(),
        });
        let grads = g.backward(l_final)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .flat_map(|v| [v.w, v.b])
            .map(|v| grads.get_or_zeros(&g, v))
            .collect::<std::result::Result<_, _>>()?;
        adam.step(&mut h.mlp_mut().tensors_mut(), &grads)?;
    }
    Ok(trace)
}
