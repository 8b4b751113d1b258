//! Run configuration: one JSON document, every field defaulted, unknown keys
//! rejected.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::concepts::{build_concept_set, ConceptSet, ConceptsConfig};
use crate::diffusion::{Denoiser, DiffusionConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::hypernet::{Hypernet, HypernetConfig};
use crate::lora::LoraSpec;
use crate::objectives::UnlearnConfig;

/// `lora` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Scale of the fixed input-side factor; 0 disables it.
    pub anchor_scale: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 1,
            alpha: 30.0,
            anchor_scale: 0.125,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub diffusion: DiffusionConfig,
    pub lora: LoraConfig,
    pub hypernet: HypernetConfig,
    pub unlearn: UnlearnConfig,
    pub concepts: ConceptsConfig,
    pub eval: EvalConfig,
}

fn digest(value: &Value) -> String {
    // serde_json maps are ordered by key, so this rendering is canonical.
    let text = serde_json::to_string(value).expect("config value serializes");
    let hash = Sha256::digest(text.as_bytes());
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    /// Parses and validates a config document. Errors carry the line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_value()).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.diffusion.validate()?;
        self.hypernet.validate()?;
        self.unlearn.validate()?;
        self.concepts.validate()?;
        self.eval.validate()?;
        if self.lora.rank == 0 {
            return Err(Error::Config("lora.rank must be at least 1".into()));
        }
        if !(self.lora.alpha > 0.0 && self.lora.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "lora.alpha must be > 0, got {}",
                self.lora.alpha
            )));
        }
        if !(self.lora.anchor_scale >= 0.0 && self.lora.anchor_scale.is_finite()) {
            return Err(Error::Config(format!(
                "lora.anchor_scale must be >= 0, got {}",
                self.lora.anchor_scale
            )));
        }
        let dims = self.lora_dims()?;
        for (target, d, k) in dims {
            if self.lora.rank > d.min(k) {
                return Err(Error::Config(format!(
                    "lora.rank {} exceeds min({d}, {k}) for target {target}",
                    self.lora.rank
                )));
            }
        }
        Ok(())
    }

    fn lora_dims(&self) -> Result<Vec<(String, usize, usize)>> {
        let shape = self.diffusion.shape(self.concepts.embed_dim);
        let probe = Denoiser::init(0, shape, self.diffusion.lora_targets.clone())?;
        Ok(probe
            .lora_targets()
            .iter()
            .map(|&t| {
                let (d, k) = probe.target_dims(t);
                (t.to_string(), d, k)
            })
            .collect())
    }

    /// Hash of everything the base model depends on.
    pub fn base_fingerprint(&self) -> String {
        digest(&json!({
            "seed": self.seed,
            "diffusion": self.diffusion,
            "concepts": self.concepts,
        }))
    }

    /// Hash of everything a trained hypernetwork depends on.
    pub fn hypernet_fingerprint(&self) -> String {
        digest(&json!({
            "seed": self.seed,
            "diffusion": self.diffusion,
            "concepts": self.concepts,
            "lora": self.lora,
            "hypernet": self.hypernet,
            "unlearn": self.unlearn,
        }))
    }

    /// Hash of the whole document.
    pub fn fingerprint(&self) -> String {
        digest(&self.to_value())
    }

    pub fn build_concepts(&self) -> Result<(ConceptSet, Vec<String>)> {
        build_concept_set(self.seed, &self.concepts)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.diffusion.schedule()
    }

    pub fn init_denoiser(&self) -> Result<Denoiser> {
        Denoiser::init(
            self.seed,
            self.diffusion.shape(self.concepts.embed_dim),
            self.diffusion.lora_targets.clone(),
        )
    }

    pub fn lora_spec(&self, base: &Denoiser) -> Result<LoraSpec> {
        base.lora_spec(self.lora.rank, self.lora.alpha, self.lora.anchor_scale, self.seed)
    }

    pub fn init_hypernet(&self, spec: LoraSpec) -> Result<Hypernet> {
        Hypernet::init(self.seed, self.hypernet.clone(), self.concepts.embed_dim, spec)
    }
}
