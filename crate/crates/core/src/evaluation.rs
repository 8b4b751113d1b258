//! Nearest-mode oracle classifier and the efficacy / specificity / generality
//! metric suite.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::concepts::{ConceptKind, ConceptSet, Role};
use crate::diffusion::{sample, Denoiser, InferenceMode, NoiseSchedule};
use crate::error::{Error, Result};
use crate::hypernet::Hypernet;
use crate::rng;
use crate::tensor::Tensor;

/// `eval` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_per_prompt: usize,
    pub guidance_w: f64,
    pub mode: InferenceMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_per_prompt: 50,
            guidance_w: 2.0,
            mode: InferenceMode::CfgConditional,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_prompt == 0 {
            return Err(Error::Config("eval.n_per_prompt must be positive".into()));
        }
        if !(self.guidance_w >= 0.0 && self.guidance_w.is_finite()) {
            return Err(Error::Config(format!(
                "eval.guidance_w must be finite and >= 0, got {}",
                self.guidance_w
            )));
        }
        Ok(())
    }
}

/// Assigns each point to the base concept with the nearest mode mean.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleClassifier {
    means: Vec<(usize, [f64; 2])>,
}

impl OracleClassifier {
    pub fn new(means: Vec<(usize, [f64; 2])>) -> Self {
        let mut means = means;
        means.sort_by_key(|(id, _)| *id);
        Self { means }
    }

    pub fn from_concepts(set: &ConceptSet) -> Self {
        Self::new(set.bases().map(|c| (c.id, c.mode.mean)).collect())
    }

    /// Ties go to the lowest id.
    pub fn classify(&self, point: [f64; 2]) -> Result<usize> {
        if point.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("cannot classify non-finite point {point:?}")));
        }
        let mut best: Option<(f64, usize)> = None;
        for &(id, m) in &self.means {
            let d = (point[0] - m[0]).powi(2) + (point[1] - m[1]).powi(2);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, id));
            }
        }
        best.map(|(_, id)| id)
            .ok_or_else(|| Error::invalid("classifier has no modes"))
    }

    pub fn labels(&self, points: &Tensor) -> Result<Vec<usize>> {
        (0..points.rows())
            .map(|i| self.classify([points.at(i, 0), points.at(i, 1)]))
            .collect()
    }

    /// Fraction of `points` labelled `target`.
    pub fn rate(&self, points: &Tensor, target: usize) -> Result<f64> {
        if points.rows() == 0 {
            return Err(Error::invalid("empty sample set"));
        }
        let labels = self.labels(points)?;
        Ok(labels.iter().filter(|&&l| l == target).count() as f64 / labels.len() as f64)
    }
}

fn mean(values: &[f64], what: &str) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid(format!("{what}: empty set")));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Acc_e: fraction of forget-conditioned samples still labelled as the target.
pub fn efficacy(samples: &Tensor, oracle: &OracleClassifier, target: usize) -> Result<f64> {
    oracle.rate(samples, target)
}

/// Acc_s: mean over retained concepts of the fraction labelled as their own id.
pub fn specificity(per_concept: &[(usize, &Tensor)], oracle: &OracleClassifier) -> Result<f64> {
    let rates = per_concept
        .iter()
        .map(|&(id, s)| oracle.rate(s, id))
        .collect::<Result<Vec<_>>>()?;
    mean(&rates, "specificity")
}

/// Acc_g: mean over eval synonyms of the fraction labelled as the target.
pub fn generality(per_synonym: &[&Tensor], oracle: &OracleClassifier, target: usize) -> Result<f64> {
    let rates = per_synonym
        .iter()
        .map(|s| oracle.rate(s, target))
        .collect::<Result<Vec<_>>>()?;
    mean(&rates, "generality")
}

fn harmonic(terms: &[f64]) -> f64 {
    if terms.iter().any(|&x| !(x > 0.0)) {
        return 0.0;
    }
    terms.len() as f64 / terms.iter().map(|x| 1.0 / x).sum::<f64>()
}

/// `3 / [(1−e)⁻¹ + s⁻¹ + (1−g)⁻¹]`, or 0 when any term vanishes.
pub fn harmonic_object(acc_e: f64, acc_s: f64, acc_g: f64) -> f64 {
    harmonic(&[1.0 - acc_e, acc_s, 1.0 - acc_g])
}

/// `2 / [(1−e)⁻¹ + s⁻¹]`, or 0 when any term vanishes.
pub fn harmonic_pair(acc_e: f64, acc_s: f64) -> f64 {
    harmonic(&[1.0 - acc_e, acc_s])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub forget: usize,
    pub retain: usize,
    pub synonym: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_e: f64,
    pub acc_s: f64,
    pub acc_g: f64,
    pub h_o_object: f64,
    pub h_o_pair: f64,
    /// Mean own-label rate over eval synonyms of retained concepts.
    pub acc_s_synonyms: Option<f64>,
    pub adapter_norms: BTreeMap<usize, f64>,
    /// Per prompt: the fraction of samples labelled as the prompt's base concept.
    pub base_label_rates: BTreeMap<usize, f64>,
    pub sample_counts: SampleCounts,
    pub mode: InferenceMode,
    pub guidance_w: f64,
    pub n_per_prompt: usize,
    pub fingerprint: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub const CSV_HEADER: &'static str =
        "fingerprint,seed,mode,n_per_prompt,guidance_w,acc_e,acc_s,acc_g,h_o_object,h_o_pair";

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            self.fingerprint,
            self.seed,
            self.mode,
            self.n_per_prompt,
            self.guidance_w,
            self.acc_e,
            self.acc_s,
            self.acc_g,
            self.h_o_object,
            self.h_o_pair
        )
    }

    /// Numeric fields compared when checking persistence drift.
    pub fn numeric_fields(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("acc_e".to_string(), self.acc_e),
            ("acc_s".to_string(), self.acc_s),
            ("acc_g".to_string(), self.acc_g),
            ("h_o_object".to_string(), self.h_o_object),
            ("h_o_pair".to_string(), self.h_o_pair),
        ];
        out.extend(self.acc_s_synonyms.map(|v| ("acc_s_synonyms".to_string(), v)));
        out.extend(
            self.adapter_norms
                .iter()
                .map(|(k, v)| (format!("adapter_norms.{k}"), *v)),
        );
        out.extend(
            self.base_label_rates
                .iter()
                .map(|(k, v)| (format!("base_label_rates.{k}"), *v)),
        );
        out
    }
}

/// Everything `run_eval` needs besides the models.
pub struct EvalInputs<'a> {
    pub schedule: &'a NoiseSchedule,
    pub concepts: &'a ConceptSet,
    pub config: &'a EvalConfig,
    pub seed: u64,
    pub fingerprint: &'a str,
}

/// Seed of the sampling run for prompt `concept_id`.
pub fn prompt_seed(seed: u64, concept_id: usize) -> u64 {
    rng::derive_seed(seed, &format!("eval/prompt{concept_id}"))
}

/// Samples every forget concept, retained concept and eval synonym with its
/// own endpoint adapter and reduces the metrics in concept-id order.
pub fn run_eval(base: &Denoiser, hypernet: Option<&Hypernet>, inputs: &EvalInputs<'_>) -> Result<MetricsReport> {
    let EvalInputs {
        schedule,
        concepts,
        config,
        seed,
        fingerprint,
    } = *inputs;
    config.validate()?;
    if config.mode != InferenceMode::Off && hypernet.is_none() {
        return Err(Error::invalid(format!(
            "mode {} needs a trained hypernetwork",
            config.mode
        )));
    }
    let oracle = OracleClassifier::from_concepts(concepts);
    let n = config.n_per_prompt;

    let mut adapter_norms = BTreeMap::new();
    let mut base_label_rates = BTreeMap::new();
    let mut forget_rates = Vec::new();
    let mut retain_rates = Vec::new();
    let mut synonym_rates = Vec::new();
    let mut retain_synonym_rates = Vec::new();

    for concept in &concepts.concepts {
        let wanted = concept.kind == ConceptKind::Base || concept.kind == ConceptKind::EvalSynonym;
        let endpoint = match hypernet {
            Some(h) => Some(h.endpoint(&concept.embedding)?),
            None => None,
        };
        if let Some(e) = &endpoint {
            adapter_norms.insert(concept.id, e.norm());
        }
        if !wanted {
            continue;
        }
        let adapter = match (config.mode, hypernet, &endpoint) {
            (InferenceMode::Off, _, _) => None,
            (_, Some(h), Some(e)) => Some((h.spec(), e)),
            _ => unreachable!("checked above"),
        };
        let batch = sample(
            base,
            schedule,
            config.mode,
            adapter,
            concept.id,
            &concept.embedding,
            &concepts.null_embedding,
            n,
            config.guidance_w,
            prompt_seed(seed, concept.id),
        )?;
        let rate = oracle.rate(&batch.points, concept.base_id())?;
        base_label_rates.insert(concept.id, rate);
        match (concept.role, concept.kind) {
            (Role::Forget, ConceptKind::Base) => forget_rates.push(rate),
            (Role::Forget, _) => synonym_rates.push(rate),
            (_, ConceptKind::Base) => retain_rates.push(rate),
            _ => retain_synonym_rates.push(rate),
        }
    }

    let acc_e = mean(&forget_rates, "efficacy")?;
    let acc_s = mean(&retain_rates, "specificity")?;
    let acc_g = mean(&synonym_rates, "generality")?;
    let acc_s_synonyms = mean(&retain_synonym_rates, "retained synonyms").ok();
    Ok(MetricsReport {
        acc_e,
        acc_s,
        acc_g,
        h_o_object: harmonic_object(acc_e, acc_s, acc_g),
        h_o_pair: harmonic_pair(acc_e, acc_s),
        acc_s_synonyms,
        adapter_norms,
        base_label_rates,
        sample_counts: SampleCounts {
            forget: forget_rates.len() * n,
            retain: retain_rates.len() * n,
            synonym: synonym_rates.len() * n,
        },
        mode: config.mode,
        guidance_w: config.guidance_w,
        n_per_prompt: n,
        fingerprint: fingerprint.to_string(),
        seed,
    })
}
