//! End-to-end stages shared by the command line and the integration tests:
//! training, checkpoint packing, reload with compatibility checks, and the
//! trajectory diagnostic.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Meta};
use crate::concepts::{ConceptSet, Role};
use crate::config::RunConfig;
use crate::diffusion::{train_base, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::evaluation::{run_eval, EvalInputs, MetricsReport};
use crate::hypernet::Hypernet;
use crate::objectives::{sample_task_batch, task_loss, train_hypernet, TraceRow};
use crate::rng;
use crate::tensor::Tensor;

pub const KIND_BASE: &str = "base";
pub const KIND_HYPERNET: &str = "hypernet";
/// Rows in the fixed batch used by [`trajectory`].
pub const TRAJECTORY_BATCH: usize = 256;

/// A base model together with everything rebuilt from its config.
#[derive(Debug, Clone)]
pub struct BaseRun {
    pub config: RunConfig,
    pub concepts: ConceptSet,
    pub schedule: NoiseSchedule,
    pub model: Denoiser,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseTraceRow {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub s: usize,
    pub theta_norm: f64,
    pub task_loss: f64,
}

pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Builds the concept set, schedule and a freshly initialized model.
pub fn prepare_base(config: &RunConfig) -> Result<(BaseRun, Vec<String>)> {
    config.validate()?;
    let (concepts, warnings) = config.build_concepts()?;
    let run = BaseRun {
        config: config.clone(),
        concepts,
        schedule: config.schedule()?,
        model: config.init_denoiser()?,
    };
    Ok((run, warnings))
}

pub fn train_base_run(config: &RunConfig) -> Result<(BaseRun, Vec<BaseTraceRow>, Vec<String>)> {
    let (mut run, warnings) = prepare_base(config)?;
    let losses = train_base(
        &mut run.model,
        &run.concepts,
        &run.schedule,
        &config.diffusion,
        config.seed,
    )?;
    let trace = losses
        .into_iter()
        .enumerate()
        .map(|(step, loss)| BaseTraceRow { step, loss })
        .collect();
    Ok((run, trace, warnings))
}

pub fn base_checkpoint(run: &BaseRun, created_at: &str) -> Checkpoint {
    Checkpoint {
        meta: Meta {
            fingerprint: run.config.base_fingerprint(),
            seed: run.config.seed,
            created_at: created_at.to_string(),
            kind: KIND_BASE.into(),
            base_fingerprint: None,
            config: run.config.to_value(),
        },
        tensors: run
            .model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect(),
    }
}

fn expect_kind(ck: &Checkpoint, kind: &str) -> Result<()> {
    if ck.meta.kind != kind {
        return Err(Error::Compat(format!(
            "expected a {kind} checkpoint, found kind `{}`",
            ck.meta.kind
        )));
    }
    Ok(())
}

/// Rebuilds a base model from its checkpoint, using the config stored in it.
pub fn load_base(ck: &Checkpoint) -> Result<BaseRun> {
    expect_kind(ck, KIND_BASE)?;
    let config = RunConfig::from_value(ck.meta.config.clone())?;
    let fp = config.base_fingerprint();
    if fp != ck.meta.fingerprint {
        return Err(Error::Compat(format!(
            "base checkpoint fingerprint {} does not match its stored config ({fp})",
            ck.meta.fingerprint
        )));
    }
    let (concepts, _) = config.build_concepts()?;
    let model = Denoiser::from_tensors(
        config.diffusion.shape(config.concepts.embed_dim),
        config.diffusion.lora_targets.clone(),
        ck.with_prefix("denoiser/"),
    )?;
    Ok(BaseRun {
        schedule: config.schedule()?,
        config,
        concepts,
        model,
    })
}

/// Fails with a compatibility error naming both fingerprints when `config`
/// would not reproduce the base in `ck`.
pub fn check_base_fingerprint(config: &RunConfig, ck: &Checkpoint) -> Result<()> {
    let want = config.base_fingerprint();
    if ck.meta.fingerprint != want {
        return Err(Error::Compat(format!(
            "base fingerprint mismatch: checkpoint {} vs config {want}",
            ck.meta.fingerprint
        )));
    }
    Ok(())
}

/// Trains a hypernetwork for `config` against a loaded base.
pub fn train_hypernet_run(config: &RunConfig, base: &BaseRun) -> Result<(Hypernet, Vec<TraceRow>)> {
    config.validate()?;
    if config.base_fingerprint() != base.config.base_fingerprint() {
        return Err(Error::Compat(format!(
            "base fingerprint mismatch: base {} vs config {}",
            base.config.base_fingerprint(),
            config.base_fingerprint()
        )));
    }
    let spec = config.lora_spec(&base.model)?;
    let mut h = config.init_hypernet(spec)?;
    let trace = train_hypernet(
        &mut h,
        &base.model,
        &base.schedule,
        &base.concepts,
        &config.unlearn,
        config.seed,
    )?;
    Ok((h, trace))
}

pub fn hypernet_checkpoint(config: &RunConfig, h: &Hypernet, created_at: &str) -> Checkpoint {
    let mut tensors: Vec<(String, Tensor)> = h.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
    for (e, a) in h.spec().entries().iter().zip(h.spec().anchors()) {
        tensors.push((format!("lora/anchor/{}", e.target), a.clone()));
    }
    Checkpoint {
        meta: Meta {
            fingerprint: config.hypernet_fingerprint(),
            seed: config.seed,
            created_at: created_at.to_string(),
            kind: KIND_HYPERNET.into(),
            base_fingerprint: Some(config.base_fingerprint()),
            config: config.to_value(),
        },
        tensors,
    }
}

/// Rebuilds a hypernetwork against `base`, checking that both were produced
/// from the same base config.
pub fn load_hypernet(ck: &Checkpoint, base: &BaseRun) -> Result<(RunConfig, Hypernet)> {
    expect_kind(ck, KIND_HYPERNET)?;
    let config = RunConfig::from_value(ck.meta.config.clone())?;
    if config.hypernet_fingerprint() != ck.meta.fingerprint {
        return Err(Error::Compat(format!(
            "hypernet checkpoint fingerprint {} does not match its stored config ({})",
            ck.meta.fingerprint,
            config.hypernet_fingerprint()
        )));
    }
    let base_fp = base.config.base_fingerprint();
    if ck.meta.base_fingerprint.as_deref() != Some(base_fp.as_str()) {
        return Err(Error::Compat(format!(
            "hypernet was trained against base {}, given base {base_fp}",
            ck.meta.base_fingerprint.as_deref().unwrap_or("<none>")
        )));
    }
    let spec = config.lora_spec(&base.model)?;
    for (e, a) in spec.entries().iter().zip(spec.anchors()) {
        let stored = ck.get(&format!("lora/anchor/{}", e.target))?;
        let drift = stored.sub(a)?.norm();
        if stored.shape() != a.shape() || drift > 1e-6 * (1.0 + a.norm()) {
            return Err(Error::Compat(format!(
                "stored adapter anchor for {} does not match config",
                e.target
            )));
        }
    }
    let mut h = config.init_hypernet(spec)?;
    h.load_tensors(ck.with_prefix("hypernet/"))?;
    Ok((config, h))
}

/// Fails with a compatibility error when `config` would not reproduce the
/// hypernetwork in `ck`.
pub fn check_hypernet_fingerprint(config: &RunConfig, ck: &Checkpoint) -> Result<()> {
    let want = config.hypernet_fingerprint();
    if ck.meta.fingerprint != want {
        return Err(Error::Compat(format!(
            "hypernet fingerprint mismatch: checkpoint {} vs config {want}",
            ck.meta.fingerprint
        )));
    }
    Ok(())
}

pub fn evaluate(config: &RunConfig, base: &BaseRun, h: Option<&Hypernet>) -> Result<MetricsReport> {
    let fingerprint = config.fingerprint();
    run_eval(
        &base.model,
        h,
        &EvalInputs {
            schedule: &base.schedule,
            concepts: &base.concepts,
            config: &config.eval,
            seed: config.seed,
            fingerprint: &fingerprint,
        },
    )
}

/// `‖θ_s‖` and the task loss at `θ_s` for `s = 0..=S`, on one fixed batch.
/// Concepts outside the forget set are measured against themselves.
pub fn trajectory(config: &RunConfig, base: &BaseRun, h: &Hypernet, concept_id: usize) -> Result<Vec<TrajectoryRow>> {
    let concept = base.concepts.get(concept_id)?;
    let c = concept.embedding.as_slice();
    let c_m = match (concept.role, base.concepts.pair_for(concept.base_id())) {
        (Role::Forget, Some(pair)) => base.concepts.get(pair.mapping)?.embedding.as_slice(),
        _ => c,
    };
    let mut r = rng::stream(config.seed, &format!("trajectory/{concept_id}"));
    let batch = sample_task_batch(concept, &base.schedule, TRAJECTORY_BATCH, &mut r)?;
    (0..=h.trajectory_len())
        .map(|s| {
            let theta = h.predict(c, s)?;
            Ok(TrajectoryRow {
                s,
                theta_norm: theta.norm(),
                task_loss: task_loss(&base.model, h.spec(), &theta, &batch, c, c_m, config.unlearn.gamma)?,
            })
        })
        .collect()
}

/// Serializes rows as one JSON object per line.
pub fn jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("row serializes"));
        out.push('\n');
    }
    out
}
