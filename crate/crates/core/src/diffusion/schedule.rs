use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

/// β, α = 1−β and ᾱ for steps `1..=T`, stored zero-based.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("schedule needs T >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "schedule needs 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 0..={}", self.steps())));
        }
        Ok(())
    }

    /// `z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·ε` with one timestep per row.
    pub fn forward_diffuse(&self, z0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
        if z0.shape() != eps.shape() {
            return Err(Error::invalid(format!(
                "noise shape {:?} differs from data shape {:?}",
                eps.shape(),
                z0.shape()
            )));
        }
        if z0.shape().len() != 2 || t.len() != z0.rows() {
            return Err(Error::invalid(format!(
                "{} timesteps for data of shape {:?}",
                t.len(),
                z0.shape()
            )));
        }
        let cols = z0.cols();
        let mut out = Vec::with_capacity(z0.numel());
        for (i, &ti) in t.iter().enumerate() {
            self.check_t(ti)?;
            let ab = self.alpha_bar(ti);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            for j in 0..cols {
                out.push(a * z0.at(i, j) + b * eps.at(i, j));
            }
        }
        Ok(Tensor::new(z0.shape().to_vec(), out)?)
    }

    /// Same step for every row.
    pub fn forward_diffuse_at(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.forward_diffuse(z0, &vec![t; z0.rows()], eps)
    }
}
