use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::lora::{LoraEntry, LoraParams, LoraSpec, LoraTarget};
use crate::nn::{Linear, LinearVars};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

/// Sizes of a denoiser network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserShape {
    pub data_dim: usize,
    pub time_features: usize,
    pub embed_dim: usize,
    pub hidden_widths: Vec<usize>,
    /// Number of diffusion steps `T`; time features encode `t/T`.
    pub horizon: usize,
}

/// Conditional noise predictor `ε(z_t, t, c)`.
///
/// The first layer is kept as two blocks: `input` acts on `concat(z_t, time
/// features)` and `cond` on the embedding `c`, with one shared bias. The
/// remaining dense layers follow, the last of which is the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    shape: DenoiserShape,
    lora_targets: Vec<LoraTarget>,
    pub input: Linear,
    pub cond: Tensor,
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct DenoiserVars {
    input: LinearVars,
    cond: Var,
    layers: Vec<LinearVars>,
}

impl DenoiserVars {
    /// Vars in [`Denoiser::tensors_mut`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.input.w, self.input.b, self.cond];
        for l in &self.layers {
            out.push(l.w);
            out.push(l.b);
        }
        out
    }
}

/// Adapter factors bound into a graph.
#[derive(Debug, Clone)]
pub struct AdapterVars<'a> {
    pub spec: &'a LoraSpec,
    pub pairs: Vec<(Var, Var)>,
}

impl<'a> AdapterVars<'a> {
    pub fn bind(g: &mut Graph, spec: &'a LoraSpec, params: &LoraParams, trainable: bool) -> Result<Self> {
        params.check(spec)?;
        let pairs = params
            .pairs()
            .iter()
            .map(|(a, b)| {
                if trainable {
                    (g.param(a.clone()), g.param(b.clone()))
                } else {
                    (g.constant(a.clone()), g.constant(b.clone()))
                }
            })
            .collect();
        Ok(Self { spec, pairs })
    }
}

pub fn time_features(t: &[usize], horizon: usize, n_features: usize) -> Tensor {
    let half = n_features / 2;
    let mut data = Vec::with_capacity(t.len() * n_features);
    for &ti in t {
        let x = ti as f64 / horizon as f64;
        for i in 0..half {
            data.push((PI * 2f64.powi(i as i32) * x).sin());
        }
        for i in 0..half {
            data.push((PI * 2f64.powi(i as i32) * x).cos());
        }
    }
    Tensor::new(vec![t.len(), n_features], data).expect("time feature shape")
}

impl Denoiser {
    pub fn new(rng: &mut impl Rng, shape: DenoiserShape, lora_targets: Vec<LoraTarget>) -> Result<Self> {
        Self::validate(&shape, &lora_targets)?;
        let h0 = shape.hidden_widths[0];
        let input = Linear::init(rng, shape.data_dim + shape.time_features, h0);
        let cond = Linear::init(rng, shape.embed_dim, h0).w;
        let mut widths = shape.hidden_widths.clone();
        widths.push(shape.data_dim);
        let layers = widths.windows(2).map(|w| Linear::init(rng, w[0], w[1])).collect();
        Ok(Self {
            shape,
            lora_targets,
            input,
            cond,
            layers,
        })
    }

    /// Seeded construction using the `denoiser/init` stream.
    pub fn init(seed: u64, shape: DenoiserShape, lora_targets: Vec<LoraTarget>) -> Result<Self> {
        Self::new(&mut rng::stream(seed, "denoiser/init"), shape, lora_targets)
    }

    fn validate(shape: &DenoiserShape, targets: &[LoraTarget]) -> Result<()> {
        if shape.hidden_widths.is_empty() || shape.hidden_widths.contains(&0) {
            return Err(Error::Config(format!(
                "denoiser hidden widths must be non-empty and positive, got {:?}",
                shape.hidden_widths
            )));
        }
        if shape.data_dim == 0 || shape.embed_dim == 0 || shape.horizon == 0 {
            return Err(Error::Config("denoiser dimensions must be positive".into()));
        }
        if !shape.time_features.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time features must be even, got {}",
                shape.time_features
            )));
        }
        if targets.is_empty() {
            return Err(Error::Config("lora_targets is empty".into()));
        }
        for (i, t) in targets.iter().enumerate() {
            if targets[..i].contains(t) {
                return Err(Error::Config(format!("lora target {t} listed twice")));
            }
            if let LoraTarget::Dense(j) = t {
                if *j >= shape.hidden_widths.len() {
                    return Err(Error::Config(format!(
                        "lora target {t} out of range: dense layers are 1..{} (use `out` for the output layer)",
                        shape.hidden_widths.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> &DenoiserShape {
        &self.shape
    }

    pub fn lora_targets(&self) -> &[LoraTarget] {
        &self.lora_targets
    }

    /// `(d, k)` of the weight a target adapts.
    pub fn target_dims(&self, target: LoraTarget) -> (usize, usize) {
        let w = self.target_weight(target);
        (w.rows(), w.cols())
    }

    fn target_weight(&self, target: LoraTarget) -> &Tensor {
        match target {
            LoraTarget::Cond => &self.cond,
            LoraTarget::Input => &self.input.w,
            LoraTarget::Dense(i) => &self.layers[i - 1].w,
            LoraTarget::Out => &self.layers.last().expect("output layer").w,
        }
    }

    pub fn lora_entries(&self, rank: usize) -> Vec<LoraEntry> {
        self.lora_targets
            .iter()
            .map(|&target| {
                let (d, k) = self.target_dims(target);
                LoraEntry { target, d, k, r: rank }
            })
            .collect()
    }

    /// Adapter spec for this model's targets. A positive `anchor_scale` adds
    /// the seeded fixed factor described in [`crate::lora`].
    pub fn lora_spec(&self, rank: usize, alpha: f64, anchor_scale: f64, seed: u64) -> Result<LoraSpec> {
        let spec = LoraSpec::new(self.lora_entries(rank), alpha)?;
        Ok(if anchor_scale > 0.0 {
            spec.with_gaussian_anchor(anchor_scale, seed)
        } else {
            spec
        })
    }

    fn check_spec(&self, spec: &LoraSpec) -> Result<()> {
        let expected = self.lora_entries(spec.entries().first().map_or(1, |e| e.r));
        let same = spec.entries().len() == expected.len()
            && spec
                .entries()
                .iter()
                .zip(&expected)
                .all(|(a, b)| a.target == b.target && a.d == b.d && a.k == b.k);
        if !same {
            return Err(Error::Lora(crate::lora::LoraError::SpecMismatch(format!(
                "adapter targets {:?} do not match model targets {:?}",
                spec.entries().iter().map(|e| e.target.to_string()).collect::<Vec<_>>(),
                self.lora_targets.iter().map(|t| t.to_string()).collect::<Vec<_>>()
            ))));
        }
        Ok(())
    }

    pub fn time_features(&self, t: &[usize]) -> Tensor {
        time_features(t, self.shape.horizon, self.shape.time_features)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DenoiserVars {
        let cond = if trainable {
            g.param(self.cond.clone())
        } else {
            g.constant(self.cond.clone())
        };
        DenoiserVars {
            input: self.input.bind(g, trainable),
            cond,
            layers: self.layers.iter().map(|l| l.bind(g, trainable)).collect(),
        }
    }

    /// Graph forward pass. `z: n×data_dim`, `c: n×embed_dim`, one `t` per row.
    /// Inputs are data, so they enter the graph as constants.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &DenoiserVars,
        adapter: Option<&AdapterVars<'_>>,
        z: &Tensor,
        t: &[usize],
        c: &Tensor,
    ) -> Result<Var> {
        if let Some(a) = adapter {
            self.check_spec(a.spec)?;
        }
        let weight = |g: &mut Graph, target: LoraTarget, w: Var| -> Result<Var> {
            match adapter.and_then(|a| a.spec.entry_for(target).map(|i| (a, i))) {
                Some((a, i)) => {
                    let (av, bv) = a.pairs[i];
                    Ok(a.spec.compose_in_graph(g, w, av, bv, i)?)
                }
                None => Ok(w),
            }
        };
        let n = z.shape()[0];
        if z.shape() != [n, self.shape.data_dim] || c.shape() != [n, self.shape.embed_dim] || t.len() != n {
            return Err(Error::invalid(format!(
                "batch mismatch: z {:?}, c {:?}, {} timesteps",
                z.shape(),
                c.shape(),
                t.len()
            )));
        }
        let x = g.constant(z.hcat(&self.time_features(t))?);
        let c = g.constant(c.clone());
        let w_in = weight(g, LoraTarget::Input, vars.input.w)?;
        let w_c = weight(g, LoraTarget::Cond, vars.cond)?;
        let hx = g.matmul_t(x, w_in)?;
        let hc = g.matmul_t(c, w_c)?;
        let pre = g.add(hx, hc)?;
        let pre = g.add_bias(pre, vars.input.b)?;
        let mut h = g.silu(pre)?;
        let last = self.layers.len() - 1;
        for (i, layer) in vars.layers.iter().enumerate() {
            let target = if i == last {
                LoraTarget::Out
            } else {
                LoraTarget::Dense(i + 1)
            };
            let w = weight(g, target, layer.w)?;
            let y = g.matmul_t(h, w)?;
            h = g.add_bias(y, layer.b)?;
            if i != last {
                h = g.silu(h)?;
            }
        }
        Ok(h)
    }

    /// Plain evaluation of `ε̂`, optionally with an adapter.
    pub fn predict(
        &self,
        adapter: Option<(&LoraSpec, &LoraParams)>,
        z: &Tensor,
        t: &[usize],
        c: &Tensor,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let av = match adapter {
            Some((spec, params)) => Some(AdapterVars::bind(&mut g, spec, params, false)?),
            None => None,
        };
        let out = self.forward(&mut g, &vars, av.as_ref(), z, t, c)?;
        Ok(g.value(out).clone())
    }

    /// `(name, tensor)` pairs in a fixed order, for checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("denoiser/input/w".to_string(), &self.input.w),
            ("denoiser/input/b".to_string(), &self.input.b),
            ("denoiser/cond/w".to_string(), &self.cond),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("denoiser/layer{}/w", i + 1), &l.w));
            out.push((format!("denoiser/layer{}/b", i + 1), &l.b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.input.w, &mut self.input.b, &mut self.cond];
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }

    /// Rebuilds a model from tensors in [`Denoiser::named_tensors`] order.
    pub fn from_tensors(shape: DenoiserShape, lora_targets: Vec<LoraTarget>, tensors: Vec<Tensor>) -> Result<Self> {
        let mut model = Self::new(&mut rng::stream(0, "unused"), shape, lora_targets)?;
        let slots = model.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Compat(format!(
                "denoiser needs {} tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Compat(format!(
                    "denoiser tensor shape {:?} does not match architecture {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }
}
