//! Central finite-difference checks of reverse-mode gradients.

use rand::Rng;

use crate::diffusion::{AdapterVars, Denoiser, DenoiserShape};
use crate::error::Result;
use crate::hypernet::{Hypernet, HypernetConfig};
use crate::lora::{self, LoraTarget};
use crate::nn::{LinearVars, Mlp};
use crate::objectives::TaskBatch;
use crate::rng::{self, StreamRng};
use crate::tensor::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;
pub const INSTANCES: usize = 20;

/// Names of every check in [`run_suite`], in order.
pub const CHECKS: &[&str] = &[
    "matmul",
    "matmul_t",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "silu",
    "relu",
    "add_bias",
    "sum",
    "mse",
    "sum_sq",
    "composition",
    "mlp",
    "task_loss",
    "removal_loss",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    /// Largest relative error, ignoring coordinates that are both near zero
    /// and within the absolute tolerance.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

/// Compares analytic and numeric gradients with respect to every input.
/// Returns `(max relative error, max absolute error, all within tolerance)`.
pub fn compare<F>(inputs: &[Tensor], build: F) -> Result<(f64, f64, bool)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|v| g.constant(v.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|v| g.param(v.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut ok = true;
    let mut values = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g, v)?;
        for j in 0..values[i].numel() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&values)?;
            values[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&values)?;
            values[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            max_abs = max_abs.max(abs);
            let scale = a.abs().max(numeric.abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            // below this magnitude the absolute tolerance governs
            if abs > ABS_TOL || scale > ABS_TOL / REL_TOL {
                max_rel = max_rel.max(rel);
            }
            if abs > ABS_TOL && rel > REL_TOL {
                ok = false;
            }
        }
    }
    Ok((max_rel, max_abs, ok))
}

fn rand_tensor(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng::normals(rng, n)).expect("shape")
}

/// Entries with magnitude at least `margin`, to keep clear of kinks.
fn away_from_zero(rng: &mut StreamRng, shape: &[usize], margin: f64) -> Tensor {
    let t = rand_tensor(rng, shape);
    t.map(|x| if x.abs() < margin { x.signum() * margin + x } else { x })
}

/// A weighted sum, so every output entry gets a distinct upstream gradient.
fn probe(g: &mut Graph, y: Var, rng_seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = rand_tensor(&mut rng::stream(rng_seed, "gradcheck/probe"), &shape);
    let wv = g.constant(w);
    let prod = g.mul(y, wv)?;
    Ok(g.sum(prod)?)
}

fn instance(name: &str, seed: u64, k: usize) -> Result<(f64, f64, bool)> {
    let s = rng::derive_seed(seed, &format!("gradcheck/{name}/{k}"));
    let mut r = rng::stream(s, "inputs");
    match name {
        "matmul" => compare(&[rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[4, 2])], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe(g, y, s)
        }),
        "matmul_t" => compare(&[rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[2, 4])], |g, v| {
            let y = g.matmul_t(v[0], v[1])?;
            probe(g, y, s)
        }),
        "transpose" => compare(&[rand_tensor(&mut r, &[3, 2])], |g, v| {
            let y = g.transpose(v[0])?;
            probe(g, y, s)
        }),
        "add" | "sub" | "mul" => {
            let inputs = [rand_tensor(&mut r, &[2, 3]), rand_tensor(&mut r, &[2, 3])];
            compare(&inputs, |g, v| {
                let y = match name {
                    "add" => g.add(v[0], v[1])?,
                    "sub" => g.sub(v[0], v[1])?,
                    _ => g.mul(v[0], v[1])?,
                };
                probe(g, y, s)
            })
        }
        "scale" => {
            let factor = r.random_range(-3.0..3.0);
            compare(&[rand_tensor(&mut r, &[4])], |g, v| {
                let y = g.scale(v[0], factor)?;
                probe(g, y, s)
            })
        }
        "silu" => compare(&[rand_tensor(&mut r, &[2, 4]).scaled(2.0)], |g, v| {
            let y = g.silu(v[0])?;
            probe(g, y, s)
        }),
        "relu" => compare(&[away_from_zero(&mut r, &[2, 4], 0.1)], |g, v| {
            let y = g.relu(v[0])?;
            probe(g, y, s)
        }),
        "add_bias" => compare(&[rand_tensor(&mut r, &[3, 2]), rand_tensor(&mut r, &[2])], |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            probe(g, y, s)
        }),
        "sum" => compare(&[rand_tensor(&mut r, &[3, 2])], |g, v| Ok(g.sum(v[0])?)),
        "mse" => compare(&[rand_tensor(&mut r, &[5]), rand_tensor(&mut r, &[5])], |g, v| {
            Ok(g.mse(v[0], v[1])?)
        }),
        "sum_sq" => compare(&[rand_tensor(&mut r, &[2, 3])], |g, v| Ok(g.sum_sq(v[0])?)),
        "composition" => composition(&mut r, s),
        "mlp" => {
            let x = rand_tensor(&mut r, &[4, 3]);
            let mlp = Mlp::init(&mut r, &[3, 5, 2], false);
            let mut inputs: Vec<Tensor> = mlp.tensors().into_iter().cloned().collect();
            for b in inputs.iter_mut().skip(1).step_by(2) {
                *b = rand_tensor(&mut r, b.shape()).scaled(0.3);
            }
            inputs.push(x);
            compare(&inputs, |g, v| {
                let layers: Vec<LinearVars> = v[..4].chunks(2).map(|p| LinearVars { w: p[0], b: p[1] }).collect();
                let y = Mlp::forward(g, &layers, v[4])?;
                probe(g, y, s)
            })
        }
        "task_loss" => task_loss_instance(&mut r, s),
        "removal_loss" => removal_instance(&mut r, s),
        other => unreachable!("unknown check {other}"),
    }
}

/// A random chain of up to six primitives over two square inputs.
fn composition(r: &mut StreamRng, s: u64) -> Result<(f64, f64, bool)> {
    let depth = r.random_range(1..=6);
    let ops: Vec<usize> = (0..depth).map(|_| r.random_range(0..8)).collect();
    let factor = r.random_range(-2.0..2.0);
    let inputs = [rand_tensor(r, &[3, 3]).scaled(0.7), rand_tensor(r, &[3, 3]).scaled(0.7)];
    compare(&inputs, |g, v| {
        let (mut x, y) = (v[0], v[1]);
        for &op in &ops {
            x = match op {
                0 => g.silu(x)?,
                1 => g.scale(x, factor)?,
                2 => g.add(x, y)?,
                3 => g.sub(y, x)?,
                4 => g.mul(x, y)?,
                5 => g.matmul(x, y)?,
                6 => g.matmul_t(y, x)?,
                _ => g.transpose(x)?,
            };
        }
        let tail = g.mse(x, y)?;
        let p = probe(g, x, s)?;
        Ok(g.add(tail, p)?)
    })
}

fn tiny_denoiser(r: &mut StreamRng) -> Result<Denoiser> {
    let shape = DenoiserShape {
        data_dim: 2,
        time_features: 2,
        embed_dim: 4,
        hidden_widths: vec![5, 4],
        horizon: 10,
    };
    Denoiser::new(r, shape, vec![LoraTarget::Cond, LoraTarget::Dense(1), LoraTarget::Out])
}

fn task_loss_instance(r: &mut StreamRng, s: u64) -> Result<(f64, f64, bool)> {
    let base = tiny_denoiser(r)?;
    let spec = base.lora_spec(1, 1.5, 0.5, s)?;
    let theta = lora::unflatten(&rng::normals(r, lora::param_count(&spec)), &spec)?;
    let n = 3;
    let batch = TaskBatch {
        zt: rand_tensor(r, &[n, 2]),
        t: (0..n).map(|_| r.random_range(1..=10)).collect(),
    };
    let c = Tensor::repeat_rows(&rng::normals(r, 4), n);
    let target = rand_tensor(r, &[n, 2]);
    let inputs: Vec<Tensor> = theta.pairs().iter().flat_map(|(a, b)| [a.clone(), b.clone()]).collect();
    compare(&inputs, |g, v| {
        let vars = base.bind(g, false);
        let adapter = AdapterVars {
            spec: &spec,
            pairs: v.chunks(2).map(|p| (p[0], p[1])).collect(),
        };
        let pred = base.forward(g, &vars, Some(&adapter), &batch.zt, &batch.t, &c)?;
        let tgt = g.constant(target.clone());
        Ok(g.mse(pred, tgt)?)
    })
}

fn removal_instance(r: &mut StreamRng, s: u64) -> Result<(f64, f64, bool)> {
    let spec = lora::LoraSpec::new(
        vec![lora::LoraEntry {
            target: LoraTarget::Out,
            d: 2,
            k: 3,
            r: 1,
        }],
        1.0,
    )?;
    let cfg = HypernetConfig {
        hidden_widths: vec![4],
        trajectory_len: 5,
        ..HypernetConfig::default()
    };
    let mut h = Hypernet::init(s, cfg, 3, spec)?;
    let head = h.mlp_mut().layers.last_mut().expect("head");
    head.w = rand_tensor(r, head.w.shape());
    let c: Vec<f64> = rng::normals(r, 3);
    let step: Vec<f64> = rng::normals(r, 5);
    let sidx = r.random_range(0..5);
    let inputs: Vec<Tensor> = h.mlp().tensors().into_iter().cloned().collect();
    compare(&inputs, |g, v| {
        let vars: Vec<LinearVars> = v.chunks(2).map(|p| LinearVars { w: p[0], b: p[1] }).collect();
        crate::objectives::removal_loss_graph(&h, g, &vars, &c, sidx, &step)
    })
}

/// Runs every check over [`INSTANCES`] seeded instances.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    CHECKS
        .iter()
        .map(|&name| {
            let mut res = CheckResult {
                name: name.to_string(),
                instances: INSTANCES,
                max_rel_err: 0.0,
                max_abs_err: 0.0,
                passed: true,
            };
            for k in 0..INSTANCES {
                let (rel, abs, ok) = instance(name, seed, k)?;
                res.max_rel_err = res.max_rel_err.max(rel);
                res.max_abs_err = res.max_abs_err.max(abs);
                res.passed &= ok;
            }
            Ok(res)
        })
        .collect()
}
