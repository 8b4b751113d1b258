use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::lora::{LoraParams, LoraSpec};
use crate::rng;
use crate::tensor::Tensor;

/// How a generated adapter enters the guided noise prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InferenceMode {
    /// Base model only.
    #[serde(rename = "off")]
    Off,
    /// Adapter on the conditional pass, frozen base on the unconditional one.
    #[serde(rename = "cfg-conditional")]
    CfgConditional,
    /// Adapter on both passes for the whole chain.
    #[serde(rename = "direct")]
    Direct,
}

impl InferenceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InferenceMode::Off => "off",
            InferenceMode::CfgConditional => "cfg-conditional",
            InferenceMode::Direct => "direct",
        }
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(InferenceMode::Off),
            "cfg-conditional" => Ok(InferenceMode::CfgConditional),
            "direct" => Ok(InferenceMode::Direct),
            other => Err(Error::invalid(format!(
                "unknown mode `{other}` (expected off, cfg-conditional or direct)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub points: Tensor,
    pub concept_id: usize,
    pub mode: InferenceMode,
}

fn combine(cond: &Tensor, uncond: Option<&Tensor>, w: f64) -> Result<Tensor> {
    match uncond {
        None => Ok(cond.clone()),
        Some(u) => Ok(cond.zip_map(u, "cfg", |c, u| (1.0 + w) * c - w * u)?),
    }
}

/// `(1+w)·ε_{θ*+θ}(c) − w·ε_{θ*}(c₀)`; the unconditional pass never sees the adapter.
pub fn cfg_predict(
    model: &Denoiser,
    adapter: Option<(&LoraSpec, &LoraParams)>,
    z: &Tensor,
    t: &[usize],
    c: &Tensor,
    c0: &Tensor,
    w: f64,
) -> Result<Tensor> {
    let cond = model.predict(adapter, z, t, c)?;
    let uncond = if w == 0.0 {
        None
    } else {
        Some(model.predict(None, z, t, c0)?)
    };
    combine(&cond, uncond.as_ref(), w)
}

/// Per-step guided prediction for `mode`.
#[allow(clippy::too_many_arguments)]
pub fn guided_predict(
    model: &Denoiser,
    mode: InferenceMode,
    adapter: Option<(&LoraSpec, &LoraParams)>,
    z: &Tensor,
    t: &[usize],
    c: &Tensor,
    c0: &Tensor,
    w: f64,
) -> Result<Tensor> {
    match mode {
        InferenceMode::Off => cfg_predict(model, None, z, t, c, c0, w),
        InferenceMode::CfgConditional => {
            let adapter = adapter.ok_or_else(|| Error::invalid("mode cfg-conditional needs an adapter"))?;
            cfg_predict(model, Some(adapter), z, t, c, c0, w)
        }
        InferenceMode::Direct => {
            let adapter = adapter.ok_or_else(|| Error::invalid("mode direct needs an adapter"))?;
            let cond = model.predict(Some(adapter), z, t, c)?;
            let uncond = if w == 0.0 {
                None
            } else {
                Some(model.predict(Some(adapter), z, t, c0)?)
            };
            combine(&cond, uncond.as_ref(), w)
        }
    }
}

/// Ancestral sampling from pure noise. The final step adds no noise.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    mode: InferenceMode,
    adapter: Option<(&LoraSpec, &LoraParams)>,
    concept_id: usize,
    embedding: &[f64],
    null_embedding: &[f64],
    n: usize,
    w: f64,
    seed: u64,
) -> Result<SampleBatch> {
    if mode != InferenceMode::Off && adapter.is_none() {
        return Err(Error::invalid(format!("mode {mode} needs a hypernetwork adapter")));
    }
    let dim = model.shape().data_dim;
    let mut rng = rng::stream(seed, "sample");
    let c = Tensor::repeat_rows(embedding, n);
    let c0 = Tensor::repeat_rows(null_embedding, n);
    let mut z = Tensor::new(vec![n, dim], rng::normals(&mut rng, n * dim))?;
    for t in (1..=schedule.steps()).rev() {
        let ts = vec![t; n];
        let eps = guided_predict(model, mode, adapter, &z, &ts, &c, &c0, w)?;
        let beta = schedule.beta(t);
        let k = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
        let inv = 1.0 / schedule.alpha(t).sqrt();
        let sigma = beta.sqrt();
        let noise = if t > 1 {
            rng::normals(&mut rng, n * dim)
        } else {
            Vec::new()
        };
        let data = z
            .data()
            .iter()
            .zip(eps.data())
            .enumerate()
            .map(|(i, (&zi, &ei))| {
                let mean = (zi - k * ei) * inv;
                if t > 1 {
                    mean + sigma * noise[i]
                } else {
                    mean
                }
            })
            .collect();
        z = Tensor::new(vec![n, dim], data)?;
    }
    if z.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::Check(format!("sampler diverged for concept {concept_id}")));
    }
    Ok(SampleBatch {
        points: z,
        concept_id,
        mode,
    })
}

/// CSV with header `x0,x1,concept_id,mode`.
pub fn write_samples_csv(batch: &SampleBatch, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "x0,x1,concept_id,mode")?;
    for i in 0..batch.points.rows() {
        writeln!(
            out,
            "{},{},{},{}",
            batch.points.at(i, 0),
            batch.points.at(i, 1),
            batch.concept_id,
            batch.mode
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, DenoiserShape, ScheduleKind};
    use crate::lora::{null_params, LoraTarget};

    fn model() -> Denoiser {
        let shape = DenoiserShape {
            data_dim: 2,
            time_features: 4,
            embed_dim: 3,
            hidden_widths: vec![8, 8],
            horizon: 10,
        };
        Denoiser::init(5, shape, vec![LoraTarget::Cond, LoraTarget::Out]).unwrap()
    }

    fn adapter(m: &Denoiser) -> (LoraSpec, LoraParams) {
        let spec = m.lora_spec(1, 2.0, 0.3, 1).unwrap();
        let flat = rng::normals(&mut rng::stream(9, "theta"), crate::lora::param_count(&spec));
        let theta = crate::lora::unflatten(&flat, &spec).unwrap();
        (spec, theta)
    }

    fn batch() -> (Tensor, Vec<usize>, Tensor, Tensor) {
        let mut r = rng::stream(3, "batch");
        let z = Tensor::matrix(4, 2, rng::normals(&mut r, 8)).unwrap();
        let c = Tensor::repeat_rows(&rng::normals(&mut r, 3), 4);
        let c0 = Tensor::repeat_rows(&[0.0, 0.0, 0.0], 4);
        (z, vec![1, 4, 7, 10], c, c0)
    }

    #[test]
    fn guidance_zero_is_conditional_pass() {
        let m = model();
        let (spec, theta) = adapter(&m);
        let (z, t, c, c0) = batch();
        let cond = m.predict(Some((&spec, &theta)), &z, &t, &c).unwrap();
        assert_eq!(
            cfg_predict(&m, Some((&spec, &theta)), &z, &t, &c, &c0, 0.0).unwrap(),
            cond
        );
        let plain = m.predict(None, &z, &t, &c).unwrap();
        assert_eq!(cfg_predict(&m, None, &z, &t, &c, &c0, 0.0).unwrap(), plain);
    }

    #[test]
    fn guidance_combines_passes() {
        let m = model();
        let (spec, theta) = adapter(&m);
        let (z, t, c, c0) = batch();
        let cond = m.predict(Some((&spec, &theta)), &z, &t, &c).unwrap();
        let uncond = m.predict(None, &z, &t, &c0).unwrap();
        let uncond_adapted = m.predict(Some((&spec, &theta)), &z, &t, &c0).unwrap();
        for w in [1.0, 2.5] {
            let got = guided_predict(
                &m,
                InferenceMode::CfgConditional,
                Some((&spec, &theta)),
                &z,
                &t,
                &c,
                &c0,
                w,
            )
            .unwrap();
            let direct = guided_predict(&m, InferenceMode::Direct, Some((&spec, &theta)), &z, &t, &c, &c0, w).unwrap();
            for i in 0..got.numel() {
                let want = (1.0 + w) * cond.data()[i] - w * uncond.data()[i];
                assert!((got.data()[i] - want).abs() < 1e-14);
                let want = (1.0 + w) * cond.data()[i] - w * uncond_adapted.data()[i];
                assert!((direct.data()[i] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn off_ignores_adapter_and_null_adapter_matches_off() {
        let m = model();
        let (spec, theta) = adapter(&m);
        let (z, t, c, c0) = batch();
        let off = guided_predict(&m, InferenceMode::Off, None, &z, &t, &c, &c0, 2.0).unwrap();
        let off_with = guided_predict(&m, InferenceMode::Off, Some((&spec, &theta)), &z, &t, &c, &c0, 2.0).unwrap();
        assert_eq!(off, off_with);
        let null = null_params(&spec);
        for mode in [InferenceMode::CfgConditional, InferenceMode::Direct] {
            let got = guided_predict(&m, mode, Some((&spec, &null)), &z, &t, &c, &c0, 2.0).unwrap();
            assert_eq!(got, off);
        }
        assert!(guided_predict(&m, InferenceMode::Direct, None, &z, &t, &c, &c0, 2.0).is_err());
    }

    #[test]
    fn single_step_sampler_matches_hand_update() {
        let mut m = model();
        m.input.w = m.input.w.map(|_| 0.0);
        m.input.b = m.input.b.map(|_| 0.0);
        let beta = 0.2;
        let schedule = make_schedule(1, beta, beta, ScheduleKind::Linear).unwrap();
        let c = [0.1, 0.2, 0.3];
        let b = sample(&m, &schedule, InferenceMode::Off, None, 0, &c, &[0.0; 3], 3, 0.0, 11).unwrap();
        let z = rng::normals(&mut rng::stream(11, "sample"), 6);
        let z = Tensor::matrix(3, 2, z).unwrap();
        let eps = m.predict(None, &z, &[1, 1, 1], &Tensor::repeat_rows(&c, 3)).unwrap();
        for i in 0..6 {
            let want = (z.data()[i] - beta.sqrt() * eps.data()[i]) / (1.0 - beta).sqrt();
            assert!((b.points.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_csv_is_stable() {
        let m = model();
        let schedule = make_schedule(10, 1e-3, 0.1, ScheduleKind::Linear).unwrap();
        let run = |seed| {
            sample(
                &m,
                &schedule,
                InferenceMode::Off,
                None,
                2,
                &[0.5, 0.0, -0.5],
                &[0.0; 3],
                5,
                1.0,
                seed,
            )
            .unwrap()
        };
        assert_eq!(run(1).points, run(1).points);
        assert_ne!(run(1).points, run(2).points);
        let mut a = Vec::new();
        write_samples_csv(&run(1), &mut a).unwrap();
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("x0,x1,concept_id,mode\n"));
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().nth(1).unwrap().ends_with(",2,off"));

        let empty = sample(
            &m,
            &schedule,
            InferenceMode::Off,
            None,
            2,
            &[0.0; 3],
            &[0.0; 3],
            0,
            1.0,
            1,
        )
        .unwrap();
        let mut e = Vec::new();
        write_samples_csv(&empty, &mut e).unwrap();
        assert_eq!(e, b"x0,x1,concept_id,mode\n");
    }

    #[test]
    fn adapter_modes_need_an_adapter() {
        let m = model();
        let schedule = make_schedule(3, 1e-3, 0.1, ScheduleKind::Linear).unwrap();
        let r = sample(
            &m,
            &schedule,
            InferenceMode::CfgConditional,
            None,
            0,
            &[0.0; 3],
            &[0.0; 3],
            2,
            1.0,
            0,
        );
        assert!(r.is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [InferenceMode::Off, InferenceMode::CfgConditional, InferenceMode::Direct] {
            assert_eq!(m.to_string().parse::<InferenceMode>().unwrap(), m);
        }
        assert!("both".parse::<InferenceMode>().is_err());
    }
}
