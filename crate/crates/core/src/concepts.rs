//! Synthetic concept space: unit embeddings, synonyms as nearby vectors, and a
//! 2-D Gaussian mode per base concept.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Radius of the circle the base-concept modes sit on.
pub const MODE_RADIUS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Forget,
    Retain,
    /// Redirect target of a forget concept. Mapping concepts are retained.
    Mapping,
}

impl Role {
    pub fn is_retained(self) -> bool {
        !matches!(self, Role::Forget)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptKind {
    Base,
    /// Synonym used while training the hypernetwork.
    TrainSynonym,
    /// Held-out synonym, only seen at evaluation.
    EvalSynonym,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mode {
    pub mean: [f64; 2],
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Concept {
    pub id: usize,
    pub name: String,
    pub role: Role,
    pub kind: ConceptKind,
    pub embedding: Vec<f64>,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synonym_of: Option<usize>,
}

impl Concept {
    /// Id of the base concept whose mode this concept samples from.
    pub fn base_id(&self) -> usize {
        self.synonym_of.unwrap_or(self.id)
    }

    pub fn embedding_tensor(&self) -> Tensor {
        Tensor::vector(self.embedding.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptPair {
    pub forget: usize,
    pub mapping: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConceptsConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub embed_dim: usize,
    pub sigma_syn: f64,
    pub sigma_data: f64,
    pub n_syn_train: usize,
    pub n_syn_eval: usize,
    pub forget_ids: Vec<usize>,
    pub mapping_ids: Vec<usize>,
}

impl Default for ConceptsConfig {
    fn default() -> Self {
        Self {
            k: 8,
            embed_dim: 64,
            sigma_syn: 0.15,
            sigma_data: 0.3,
            n_syn_train: 2,
            n_syn_eval: 3,
            forget_ids: vec![0],
            mapping_ids: vec![1],
        }
    }
}

impl ConceptsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("concepts.K must be at least 2, got {}", self.k)));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config(format!(
                "concepts.embed_dim must be at least 2, got {}",
                self.embed_dim
            )));
        }
        if !(self.sigma_syn >= 0.0 && self.sigma_syn.is_finite()) {
            return Err(Error::Config(format!(
                "concepts.sigma_syn must be >= 0, got {}",
                self.sigma_syn
            )));
        }
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) {
            return Err(Error::Config(format!(
                "concepts.sigma_data must be > 0, got {}",
                self.sigma_data
            )));
        }
        if self.forget_ids.is_empty() {
            return Err(Error::Config("concepts.forget_ids is empty".into()));
        }
        if self.forget_ids.len() != self.mapping_ids.len() {
            return Err(Error::Config(format!(
                "concepts.forget_ids has {} entries but mapping_ids has {}",
                self.forget_ids.len(),
                self.mapping_ids.len()
            )));
        }
        for &id in self.forget_ids.iter().chain(&self.mapping_ids) {
            if id >= self.k {
                return Err(Error::Config(format!(
                    "concept id {id} out of range for K = {}",
                    self.k
                )));
            }
        }
        for (i, f) in self.forget_ids.iter().enumerate() {
            if self.forget_ids[..i].contains(f) {
                return Err(Error::Config(format!("concept {f} listed twice in forget_ids")));
            }
            if self.mapping_ids.contains(f) {
                return Err(Error::Config(format!(
                    "concept {f} is both forgotten and a mapping target"
                )));
            }
        }
        if self.forget_ids.len() >= self.k {
            return Err(Error::Config("at least one concept must be retained".into()));
        }
        Ok(())
    }
}

/// Registry of concepts, forget→mapping pairs and the null embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSet {
    pub embed_dim: usize,
    /// Spread used to draw synonyms, reused for training-time augmentation.
    pub sigma_syn: f64,
    pub concepts: Vec<Concept>,
    pub pairs: Vec<ConceptPair>,
    pub null_embedding: Vec<f64>,
}

pub fn null_embedding(embed_dim: usize) -> Vec<f64> {
    vec![0.0; embed_dim]
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// `normalize(base + σ·g)` with `g` standard normal.
pub fn perturb_embedding(base: &[f64], sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    if sigma == 0.0 {
        // renormalizing a unit vector can move it by an ulp
        return base.to_vec();
    }
    let mut v: Vec<f64> = base.iter().map(|&b| b + sigma * rng::normal(rng)).collect();
    normalize(&mut v);
    v
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v = rng::normals(rng, dim);
        if v.iter().any(|&x| x != 0.0) {
            normalize(&mut v);
            return v;
        }
    }
}

/// Builds the standard concept set along with any non-fatal warnings.
pub fn build_concept_set(seed: u64, cfg: &ConceptsConfig) -> Result<(ConceptSet, Vec<String>)> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    if cfg.k > 2 * cfg.embed_dim {
        warnings.push(format!(
            "K = {} base concepts in {} dimensions: random embeddings will be poorly separated",
            cfg.k, cfg.embed_dim
        ));
    }
    let spacing = 2.0 * MODE_RADIUS * (std::f64::consts::PI / cfg.k as f64).sin();
    if spacing < 6.0 * cfg.sigma_data {
        warnings.push(format!(
            "adjacent modes are {spacing:.3} apart, less than 6 sigma_data = {:.3}",
            6.0 * cfg.sigma_data
        ));
    }

    let mut emb_rng = rng::stream(seed, "concepts/embedding");
    let mut syn_rng = rng::stream(seed, "concepts/synonym");
    let role_of = |k: usize| {
        if cfg.forget_ids.contains(&k) {
            Role::Forget
        } else if cfg.mapping_ids.contains(&k) {
            Role::Mapping
        } else {
            Role::Retain
        }
    };

    let mut concepts = Vec::new();
    for k in 0..cfg.k {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / cfg.k as f64;
        concepts.push(Concept {
            id: k,
            name: format!("concept{k}"),
            role: role_of(k),
            kind: ConceptKind::Base,
            embedding: unit_vector(&mut emb_rng, cfg.embed_dim),
            mode: Mode {
                mean: [MODE_RADIUS * angle.cos(), MODE_RADIUS * angle.sin()],
                sigma: cfg.sigma_data,
            },
            synonym_of: None,
        });
    }
    for k in 0..cfg.k {
        let base = concepts[k].clone();
        let kinds = std::iter::repeat_n(ConceptKind::TrainSynonym, cfg.n_syn_train)
            .chain(std::iter::repeat_n(ConceptKind::EvalSynonym, cfg.n_syn_eval));
        for (j, kind) in kinds.enumerate() {
            let (tag, idx) = match kind {
                ConceptKind::TrainSynonym => ("train", j),
                _ => ("eval", j - cfg.n_syn_train),
            };
            concepts.push(Concept {
                id: concepts.len(),
                name: format!("{}/{tag}{idx}", base.name),
                role: base.role,
                kind,
                embedding: perturb_embedding(&base.embedding, cfg.sigma_syn, &mut syn_rng),
                mode: base.mode,
                synonym_of: Some(k),
            });
        }
    }
    let pairs = cfg
        .forget_ids
        .iter()
        .zip(&cfg.mapping_ids)
        .map(|(&forget, &mapping)| ConceptPair { forget, mapping })
        .collect();
    let set = ConceptSet {
        embed_dim: cfg.embed_dim,
        sigma_syn: cfg.sigma_syn,
        concepts,
        pairs,
        null_embedding: null_embedding(cfg.embed_dim),
    };
    set.validate()?;
    Ok((set, warnings))
}

impl ConceptSet {
    pub fn get(&self, id: usize) -> Result<&Concept> {
        self.concepts
            .get(id)
            .filter(|c| c.id == id)
            .ok_or_else(|| Error::invalid(format!("unknown concept id {id}")))
    }

    pub fn bases(&self) -> impl Iterator<Item = &Concept> {
        self.concepts.iter().filter(|c| c.kind == ConceptKind::Base)
    }

    pub fn synonyms_of(&self, base: usize, kind: ConceptKind) -> impl Iterator<Item = &Concept> {
        self.concepts
            .iter()
            .filter(move |c| c.synonym_of == Some(base) && c.kind == kind)
    }

    pub fn pair_for(&self, forget_base: usize) -> Option<&ConceptPair> {
        self.pairs.iter().find(|p| p.forget == forget_base)
    }

    /// Forget bases and their train synonyms: the `c` drawn during unlearning.
    pub fn forget_training(&self) -> Vec<&Concept> {
        self.concepts
            .iter()
            .filter(|c| c.role == Role::Forget && c.kind != ConceptKind::EvalSynonym)
            .collect()
    }

    /// Retained bases and their train synonyms.
    pub fn retain_training(&self) -> Vec<&Concept> {
        self.concepts
            .iter()
            .filter(|c| c.role.is_retained() && c.kind != ConceptKind::EvalSynonym)
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: ConceptSet = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "concept set",
            detail: e.to_string(),
        })?;
        set.validate()?;
        Ok(set)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("concept set serializes")
    }

    /// Structural checks applied to every built or parsed set.
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Error::Format {
            what: "concept set",
            detail,
        };
        if self.embed_dim == 0 {
            return Err(bad("embed_dim is 0".into()));
        }
        if !(self.sigma_syn >= 0.0 && self.sigma_syn.is_finite()) {
            return Err(bad(format!("sigma_syn {} is invalid", self.sigma_syn)));
        }
        if self.null_embedding.len() != self.embed_dim {
            return Err(bad(format!(
                "null embedding has length {}, expected {}",
                self.null_embedding.len(),
                self.embed_dim
            )));
        }
        for (i, c) in self.concepts.iter().enumerate() {
            if c.id != i {
                return Err(bad(format!("concept at position {i} has id {}", c.id)));
            }
            if c.embedding.len() != self.embed_dim {
                return Err(bad(format!("concept {i}: embedding length {}", c.embedding.len())));
            }
            let norm = c.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= 1e-9) {
                return Err(bad(format!("concept {i}: embedding norm {norm} is not 1")));
            }
            if !(c.mode.sigma > 0.0 && c.mode.sigma.is_finite()) || c.mode.mean.iter().any(|m| !m.is_finite()) {
                return Err(bad(format!("concept {i}: invalid mode")));
            }
            match (c.kind, c.synonym_of) {
                (ConceptKind::Base, None) => {}
                (ConceptKind::Base, Some(_)) => return Err(bad(format!("base concept {i} has synonym_of"))),
                (_, None) => return Err(bad(format!("synonym {i} has no synonym_of"))),
                (_, Some(b)) => {
                    let base = self
                        .concepts
                        .get(b)
                        .filter(|x| x.kind == ConceptKind::Base)
                        .ok_or_else(|| bad(format!("synonym {i} points at {b}, not a base concept")))?;
                    if base.role != c.role {
                        return Err(bad(format!("synonym {i} role differs from its base")));
                    }
                }
            }
        }
        if self.pairs.is_empty() {
            return Err(bad("no forget pairs".into()));
        }
        for c in self.bases().filter(|c| c.role == Role::Forget) {
            let n = self.pairs.iter().filter(|p| p.forget == c.id).count();
            if n != 1 {
                return Err(bad(format!("forget concept {} has {n} mapping partners", c.id)));
            }
        }
        for p in &self.pairs {
            let ok = |id: usize, role: Role| {
                self.concepts
                    .get(id)
                    .is_some_and(|c| c.kind == ConceptKind::Base && c.role == role)
            };
            if !ok(p.forget, Role::Forget) || !ok(p.mapping, Role::Mapping) {
                return Err(bad(format!("pair {} -> {} has wrong roles", p.forget, p.mapping)));
            }
        }
        if !self.bases().any(|c| c.role.is_retained()) {
            return Err(bad("no retained concepts".into()));
        }
        Ok(())
    }
}

/// `n` draws from `N(μ, σ²·I₂)` of the concept's mode, as an `n×2` tensor.
pub fn sample_data_with(concept: &Concept, n: usize, rng: &mut impl Rng) -> Tensor {
    let m = concept.mode;
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        data.push(m.mean[0] + m.sigma * rng::normal(rng));
        data.push(m.mean[1] + m.sigma * rng::normal(rng));
    }
    Tensor::new(vec![n, 2], data).expect("sample shape")
}

pub fn sample_data(concept: &Concept, n: usize, seed: u64) -> Tensor {
    sample_data_with(concept, n, &mut rng::stream(seed, "concepts/data"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn standard_set_shape() {
        let (set, warnings) = build_concept_set(0, &ConceptsConfig::default()).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(set.concepts.len(), 8 * 6);
        assert_eq!(set.bases().count(), 8);
        assert_eq!(set.pairs, vec![ConceptPair { forget: 0, mapping: 1 }]);
        assert_eq!(set.concepts[1].role, Role::Mapping);
        assert_eq!(set.synonyms_of(0, ConceptKind::EvalSynonym).count(), 3);
        assert_eq!(set.forget_training().len(), 3);
        assert_eq!(set.retain_training().len(), 21);
        for c in &set.concepts {
            let n = cosine(&c.embedding, &c.embedding).sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_sigma_synonym_is_base() {
        let cfg = ConceptsConfig {
            sigma_syn: 0.0,
            ..ConceptsConfig::default()
        };
        let (set, _) = build_concept_set(3, &cfg).unwrap();
        for c in set.concepts.iter().filter(|c| c.kind != ConceptKind::Base) {
            assert_eq!(c.embedding, set.concepts[c.base_id()].embedding);
        }
    }

    #[test]
    fn null_embedding_props() {
        let c0 = null_embedding(64);
        assert!(c0.iter().all(|&x| x == 0.0));
        let (set, _) = build_concept_set(0, &ConceptsConfig::default()).unwrap();
        assert_eq!(set.null_embedding, c0);
        assert!(set.concepts.iter().all(|c| c.embedding != c0));
    }

    #[test]
    fn mode_separation() {
        let (set, _) = build_concept_set(0, &ConceptsConfig::default()).unwrap();
        let bases: Vec<_> = set.bases().collect();
        for (i, a) in bases.iter().enumerate() {
            for b in &bases[i + 1..] {
                let d = ((a.mode.mean[0] - b.mode.mean[0]).powi(2) + (a.mode.mean[1] - b.mode.mean[1]).powi(2)).sqrt();
                assert!(d >= 6.0 * 0.3);
            }
        }
    }

    #[test]
    fn sample_data_basics() {
        let (set, _) = build_concept_set(0, &ConceptsConfig::default()).unwrap();
        let c = &set.concepts[2];
        assert_eq!(sample_data(c, 0, 1).shape(), &[0, 2]);
        assert_eq!(sample_data(c, 5, 1), sample_data(c, 5, 1));
        let syn = set.synonyms_of(2, ConceptKind::TrainSynonym).next().unwrap();
        assert_eq!(sample_data(syn, 5, 1), sample_data(c, 5, 1));
    }

    #[test]
    fn config_validation() {
        let bad = |f: fn(&mut ConceptsConfig)| {
            let mut c = ConceptsConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.k = 1));
        assert!(bad(|c| c.embed_dim = 1));
        assert!(bad(|c| c.mapping_ids = vec![0]));
        assert!(bad(|c| c.forget_ids = vec![9]));
        assert!(bad(|c| c.mapping_ids = vec![]));
    }

    #[test]
    fn json_round_trip_and_rejects() {
        let (set, _) = build_concept_set(1, &ConceptsConfig::default()).unwrap();
        let back = ConceptSet::from_json(&set.to_json()).unwrap();
        assert_eq!(back, set);
        let mut broken = set.clone();
        broken.concepts[3].embedding[0] += 0.5;
        assert!(ConceptSet::from_json(&broken.to_json()).is_err());
        assert!(ConceptSet::from_json("{}").is_err());
    }
}
