//! Low-rank adapters.
//!
//! Weights are stored `d×k` (output × input). An adapter entry holds
//! `A: d×r` and `B: r×k` and contributes `ΔW = α·A·B`, so that
//! `ΔW[i][j] = α·Σ_q A[i][q]·B[q][j]`.
//!
//! A spec may carry a fixed anchor `B₀` per entry. The composed update is then
//! `α·A·(B₀ + B)`. Because `A = 0` in [`null_params`], the null adapter still
//! composes to exactly `ΔW = 0`, while the task gradient with respect to `A`
//! at the null point is `α·G·(B₀)ᵀ` rather than zero.
//!
//! The flat view concatenates entries in spec order, each as `A` row-major
//! followed by `B` row-major.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::rng;
use crate::tensor::{Graph, Result as TensorResult, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoraError {
    #[error("entry {index}: rank {r} must satisfy 1 <= r <= min({d}, {k})")]
    BadRank { index: usize, d: usize, k: usize, r: usize },
    #[error("alpha must be positive, got {0}")]
    BadAlpha(f64),
    #[error("flat vector has length {got}, spec needs {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("adapter does not match spec: {0}")]
    SpecMismatch(String),
    #[error("unknown lora target `{0}` (expected cond, input, dense<i> or out)")]
    UnknownTarget(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which weight matrix of the denoiser an entry adapts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LoraTarget {
    /// Columns of the first layer that consume the concept embedding.
    Cond,
    /// Columns of the first layer that consume the noisy point and time features.
    Input,
    /// Dense layer `i >= 1` (the first layer is split into `Input` and `Cond`).
    Dense(usize),
    /// The output layer, whatever its index.
    Out,
}

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoraTarget::Cond => f.write_str("cond"),
            LoraTarget::Input => f.write_str("input"),
            LoraTarget::Dense(i) => write!(f, "dense{i}"),
            LoraTarget::Out => f.write_str("out"),
        }
    }
}

impl FromStr for LoraTarget {
    type Err = LoraError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cond" => Ok(LoraTarget::Cond),
            "input" => Ok(LoraTarget::Input),
            "out" => Ok(LoraTarget::Out),
            other => other
                .strip_prefix("dense")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&i| i >= 1)
                .map(LoraTarget::Dense)
                .ok_or_else(|| LoraError::UnknownTarget(other.to_owned())),
        }
    }
}

impl Serialize for LoraTarget {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LoraTarget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoraEntry {
    pub target: LoraTarget,
    pub d: usize,
    pub k: usize,
    pub r: usize,
}

impl LoraEntry {
    pub fn param_count(&self) -> usize {
        self.r * (self.d + self.k)
    }
}

/// Shapes, scale and anchors of a full adapter set.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraSpec {
    entries: Vec<LoraEntry>,
    alpha: f64,
    anchors: Vec<Tensor>,
}

impl LoraSpec {
    /// Spec with zero anchors, i.e. the plain `ΔW = α·A·B` factorization.
    pub fn new(entries: Vec<LoraEntry>, alpha: f64) -> Result<Self, LoraError> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(LoraError::BadAlpha(alpha));
        }
        for (index, e) in entries.iter().enumerate() {
            if e.r == 0 || e.r > e.d.min(e.k) {
                return Err(LoraError::BadRank {
                    index,
                    d: e.d,
                    k: e.k,
                    r: e.r,
                });
            }
        }
        let anchors = entries.iter().map(|e| Tensor::zeros(&[e.r, e.k])).collect();
        Ok(Self {
            entries,
            alpha,
            anchors,
        })
    }

    /// Replaces the anchors with seeded `N(0, scale²)` draws.
    pub fn with_gaussian_anchor(mut self, scale: f64, seed: u64) -> Self {
        let mut r = rng::stream(seed, "lora/anchor");
        self.anchors = self
            .entries
            .iter()
            .map(|e| {
                let data = rng::normals(&mut r, e.r * e.k).into_iter().map(|x| x * scale).collect();
                Tensor::new(vec![e.r, e.k], data).expect("anchor shape")
            })
            .collect();
        self
    }

    pub fn with_anchors(mut self, anchors: Vec<Tensor>) -> Result<Self, LoraError> {
        if anchors.len() != self.entries.len() {
            return Err(LoraError::SpecMismatch(format!(
                "{} anchors for {} entries",
                anchors.len(),
                self.entries.len()
            )));
        }
        for (a, e) in anchors.iter().zip(&self.entries) {
            if a.shape() != [e.r, e.k] {
                return Err(LoraError::SpecMismatch(format!(
                    "anchor for {} has shape {:?}, expected [{}, {}]",
                    e.target,
                    a.shape(),
                    e.r,
                    e.k
                )));
            }
        }
        self.anchors = anchors;
        Ok(self)
    }

    pub fn entries(&self) -> &[LoraEntry] {
        &self.entries
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn anchors(&self) -> &[Tensor] {
        &self.anchors
    }

    pub fn entry_for(&self, target: LoraTarget) -> Option<usize> {
        self.entries.iter().position(|e| e.target == target)
    }

    /// Effective `ΔW` of entry `index` for `params`.
    pub fn delta(&self, params: &LoraParams, index: usize) -> Result<Tensor, LoraError> {
        params.check(self)?;
        let (a, b) = &params.pairs[index];
        let b_eff = b.add(&self.anchors[index])?;
        Ok(a.matmul(&b_eff)?.scaled(self.alpha))
    }

    /// `W + ΔW` for entry `index`.
    pub fn compose(&self, w: &Tensor, params: &LoraParams, index: usize) -> Result<Tensor, LoraError> {
        params.check(self)?;
        let (a, b) = &params.pairs[index];
        let b_eff = b.add(&self.anchors[index])?;
        Ok(apply_lora(w, a, &b_eff, self.alpha)?)
    }

    /// Graph version of [`LoraSpec::compose`].
    pub fn compose_in_graph(&self, g: &mut Graph, w: Var, a: Var, b: Var, index: usize) -> TensorResult<Var> {
        let anchor = g.constant(self.anchors[index].clone());
        let b_eff = g.add(b, anchor)?;
        let prod = g.matmul(a, b_eff)?;
        let delta = g.scale(prod, self.alpha)?;
        g.add(w, delta)
    }
}

/// `W' = W + α·A·B`; `W` is left untouched.
pub fn apply_lora(w: &Tensor, a: &Tensor, b: &Tensor, alpha: f64) -> TensorResult<Tensor> {
    let delta = a.matmul(b)?;
    if delta.shape() != w.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "apply_lora",
            lhs: w.shape().to_vec(),
            rhs: delta.shape().to_vec(),
        });
    }
    w.zip_map(&delta, "apply_lora", |x, d| x + alpha * d)
}

pub fn param_count(spec: &LoraSpec) -> usize {
    spec.entries.iter().map(LoraEntry::param_count).sum()
}

/// Per-entry `(A, B)` factors in spec order.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraParams {
    pairs: Vec<(Tensor, Tensor)>,
}

impl LoraParams {
    pub fn new(spec: &LoraSpec, pairs: Vec<(Tensor, Tensor)>) -> Result<Self, LoraError> {
        let p = Self { pairs };
        p.check(spec)?;
        Ok(p)
    }

    pub fn pairs(&self) -> &[(Tensor, Tensor)] {
        &self.pairs
    }

    pub fn check(&self, spec: &LoraSpec) -> Result<(), LoraError> {
        if self.pairs.len() != spec.entries.len() {
            return Err(LoraError::SpecMismatch(format!(
                "{} factor pairs for {} entries",
                self.pairs.len(),
                spec.entries.len()
            )));
        }
        for ((a, b), e) in self.pairs.iter().zip(&spec.entries) {
            if a.shape() != [e.d, e.r] || b.shape() != [e.r, e.k] {
                return Err(LoraError::SpecMismatch(format!(
                    "{}: A {:?} B {:?}, expected A [{}, {}] B [{}, {}]",
                    e.target,
                    a.shape(),
                    b.shape(),
                    e.d,
                    e.r,
                    e.r,
                    e.k
                )));
            }
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (a, b) in &self.pairs {
            out.extend_from_slice(a.data());
            out.extend_from_slice(b.data());
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.pairs
            .iter()
            .map(|(a, b)| a.sum_sq() + b.sum_sq())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_null(&self) -> bool {
        self.pairs
            .iter()
            .all(|(a, b)| a.data().iter().chain(b.data()).all(|&x| x == 0.0))
    }
}

/// The all-zero adapter.
pub fn null_params(spec: &LoraSpec) -> LoraParams {
    LoraParams {
        pairs: spec
            .entries
            .iter()
            .map(|e| (Tensor::zeros(&[e.d, e.r]), Tensor::zeros(&[e.r, e.k])))
            .collect(),
    }
}

pub fn flatten(params: &LoraParams) -> Vec<f64> {
    params.flatten()
}

pub fn unflatten(values: &[f64], spec: &LoraSpec) -> Result<LoraParams, LoraError> {
    let expected = param_count(spec);
    if values.len() != expected {
        return Err(LoraError::LengthMismatch {
            expected,
            got: values.len(),
        });
    }
    let mut offset = 0;
    let mut pairs = Vec::with_capacity(spec.entries.len());
    for e in &spec.entries {
        let na = e.d * e.r;
        let nb = e.r * e.k;
        let a = Tensor::new(vec![e.d, e.r], values[offset..offset + na].to_vec())?;
        offset += na;
        let b = Tensor::new(vec![e.r, e.k], values[offset..offset + nb].to_vec())?;
        offset += nb;
        pairs.push((a, b));
    }
    Ok(LoraParams { pairs })
}
