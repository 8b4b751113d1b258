//! The field network `H(c, s)` that emits adapter weights for a concept
//! embedding `c` and a trajectory step `s ∈ {0, …, S}`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{self, LoraParams, LoraSpec};
use crate::nn::{LinearVars, Mlp};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepEncoding {
    /// The single feature `s/S`.
    Scalar,
    /// `sin(π·2^i·s/S)` then `cos(π·2^i·s/S)` for `i < step_features/2`.
    Sinusoidal,
}

/// `hypernet` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HypernetConfig {
    pub hidden_widths: Vec<usize>,
    pub step_encoding: StepEncoding,
    /// Feature count for the sinusoidal encoding; ignored for `scalar`.
    pub step_features: usize,
    #[serde(rename = "S")]
    pub trajectory_len: usize,
    /// Emit `raw(c, s) − raw(c, 0)` so that step 0 is exactly the null adapter.
    pub zero_anchor: bool,
}

impl Default for HypernetConfig {
    fn default() -> Self {
        Self {
            hidden_widths: vec![256, 256],
            step_encoding: StepEncoding::Scalar,
            step_features: 8,
            trajectory_len: 50,
            zero_anchor: true,
        }
    }
}

impl HypernetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trajectory_len == 0 {
            return Err(Error::Config("hypernet.S must be at least 1".into()));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::Config("hypernet.hidden_widths must be positive".into()));
        }
        if self.step_encoding == StepEncoding::Sinusoidal
            && (self.step_features == 0 || !self.step_features.is_multiple_of(2))
        {
            return Err(Error::Config(format!(
                "hypernet.step_features must be even and positive, got {}",
                self.step_features
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        match self.step_encoding {
            StepEncoding::Scalar => 1,
            StepEncoding::Sinusoidal => self.step_features,
        }
    }
}

pub fn step_encode(s: usize, trajectory_len: usize, cfg: &HypernetConfig) -> Result<Vec<f64>> {
    if s > trajectory_len {
        return Err(Error::invalid(format!("step {s} outside 0..={trajectory_len}")));
    }
    let x = s as f64 / trajectory_len as f64;
    Ok(match cfg.step_encoding {
        StepEncoding::Scalar => vec![x],
        StepEncoding::Sinusoidal => {
            let half = cfg.step_features / 2;
            let freq = |i: usize| PI * 2f64.powi(i as i32) * x;
            (0..half)
                .map(|i| freq(i).sin())
                .chain((0..half).map(|i| freq(i).cos()))
                .collect()
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypernet {
    config: HypernetConfig,
    embed_dim: usize,
    spec: LoraSpec,
    mlp: Mlp,
}

impl Hypernet {
    /// Random hidden layers and a zero output head, so the initial field is
    /// the null adapter everywhere.
    pub fn init(seed: u64, config: HypernetConfig, embed_dim: usize, spec: LoraSpec) -> Result<Self> {
        config.validate()?;
        let mut widths = vec![embed_dim + config.feature_dim()];
        widths.extend(&config.hidden_widths);
        widths.push(lora::param_count(&spec));
        let mlp = Mlp::init(&mut rng::stream(seed, "hypernet/init"), &widths, true);
        Ok(Self {
            config,
            embed_dim,
            spec,
            mlp,
        })
    }

    pub fn config(&self) -> &HypernetConfig {
        &self.config
    }

    pub fn spec(&self) -> &LoraSpec {
        &self.spec
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn trajectory_len(&self) -> usize {
        self.config.trajectory_len
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<LinearVars> {
        self.mlp.bind(g, trainable)
    }

    fn inputs(&self, c: &Tensor, s: &[usize]) -> Result<Tensor> {
        if c.shape().len() != 2 || c.cols() != self.embed_dim || c.rows() != s.len() {
            return Err(Error::invalid(format!(
                "hypernet input: embeddings {:?} with {} steps, embed_dim {}",
                c.shape(),
                s.len(),
                self.embed_dim
            )));
        }
        let f = self.config.feature_dim();
        let mut feats = Vec::with_capacity(s.len() * f);
        for &si in s {
            feats.extend(step_encode(si, self.config.trajectory_len, &self.config)?);
        }
        Ok(c.hcat(&Tensor::new(vec![s.len(), f], feats)?)?)
    }

    /// Field values for a batch: row `i` is the flat adapter for `(c_i, s_i)`.
    pub fn field_graph(&self, g: &mut Graph, vars: &[LinearVars], c: &Tensor, s: &[usize]) -> Result<Var> {
        let x = g.constant(self.inputs(c, s)?);
        let raw = Mlp::forward(g, vars, x)?;
        if !self.config.zero_anchor {
            return Ok(raw);
        }
        let x0 = g.constant(self.inputs(c, &vec![0; s.len()])?);
        let raw0 = Mlp::forward(g, vars, x0)?;
        Ok(g.sub(raw, raw0)?)
    }

    pub fn predict_flat(&self, c: &[f64], s: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.field_graph(&mut g, &vars, &Tensor::repeat_rows(c, 1), &[s])?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn predict(&self, c: &[f64], s: usize) -> Result<LoraParams> {
        Ok(lora::unflatten(&self.predict_flat(c, s)?, &self.spec)?)
    }

    /// The inference adapter `H(c, S)`.
    pub fn endpoint(&self, c: &[f64]) -> Result<LoraParams> {
        self.predict(c, self.config.trajectory_len)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.mlp
            .layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("hypernet/layer{i}/w"), &l.w),
                    (format!("hypernet/layer{i}/b"), &l.b),
                ]
            })
            .collect()
    }

    /// Replaces the weights with tensors in [`Hypernet::named_tensors`] order.
    pub fn load_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        let slots = self.mlp.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Compat(format!(
                "hypernet needs {} tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Compat(format!(
                    "hypernet tensor shape {:?} does not match architecture {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{LoraEntry, LoraTarget};

    fn small(zero_head: bool) -> Hypernet {
        let spec = LoraSpec::new(
            vec![LoraEntry {
                target: LoraTarget::Out,
                d: 2,
                k: 3,
                r: 1,
            }],
            1.0,
        )
        .unwrap();
        let cfg = HypernetConfig {
            hidden_widths: vec![6],
            trajectory_len: 4,
            ..HypernetConfig::default()
        };
        let mut h = Hypernet::init(1, cfg, 3, spec).unwrap();
        if !zero_head {
            let head = h.mlp.layers.last_mut().unwrap();
            let n = head.w.numel();
            head.w = Tensor::new(
                head.w.shape().to_vec(),
                (0..n).map(|i| (i as f64 * 0.7).sin()).collect(),
            )
            .unwrap();
        }
        h
    }

    #[test]
    fn scalar_encoding_endpoints() {
        let cfg = HypernetConfig::default();
        assert_eq!(step_encode(0, 50, &cfg).unwrap(), vec![0.0]);
        assert_eq!(step_encode(50, 50, &cfg).unwrap(), vec![1.0]);
        assert!(step_encode(51, 50, &cfg).is_err());
    }

    #[test]
    fn sinusoidal_encoding_formula() {
        let cfg = HypernetConfig {
            step_encoding: StepEncoding::Sinusoidal,
            step_features: 4,
            ..HypernetConfig::default()
        };
        let f = step_encode(25, 50, &cfg).unwrap();
        let x = 0.5;
        let expected = [
            (PI * x).sin(),
            (2.0 * PI * x).sin(),
            (PI * x).cos(),
            (2.0 * PI * x).cos(),
        ];
        for (a, b) in f.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_head_gives_null_everywhere() {
        let h = small(true);
        for s in 0..=4 {
            assert!(h.predict(&[0.3, -0.2, 0.9], s).unwrap().is_null());
        }
    }

    #[test]
    fn origin_is_exactly_null() {
        let h = small(false);
        assert!(h.predict(&[0.3, -0.2, 0.9], 0).unwrap().is_null());
        assert!(!h.predict(&[0.3, -0.2, 0.9], 2).unwrap().is_null());
        let a = h.predict_flat(&[0.1, 0.2, 0.3], 3).unwrap();
        let b = h.predict_flat(&[0.1, 0.2, 0.3], 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let h = small(false);
        assert!(h.predict(&[0.3, -0.2], 1).is_err());
        assert!(h.predict(&[0.3, -0.2, 0.1], 5).is_err());
    }
}
