//! Dense layers shared by the denoiser and the hypernetwork.

use rand::Rng;

use crate::rng;
use crate::tensor::{Graph, Result, Tensor, Var};

/// Affine map `y = x·Wᵀ + b` with `W: out×in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// `N(0, 1/in)` weights and zero bias.
    pub fn init(rng: &mut impl Rng, input: usize, output: usize) -> Self {
        let scale = 1.0 / (input.max(1) as f64).sqrt();
        let data = rng::normals(rng, input * output)
            .into_iter()
            .map(|x| x * scale)
            .collect();
        Self {
            w: Tensor::new(vec![output, input], data).expect("linear shape"),
            b: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Tensor::zeros(&[output, input]),
            b: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LinearVars {
        let (w, b) = if trainable {
            (g.param(self.w.clone()), g.param(self.b.clone()))
        } else {
            (g.constant(self.w.clone()), g.constant(self.b.clone()))
        };
        LinearVars { w, b }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul_t(x, self.w)?;
        g.add_bias(y, self.b)
    }
}

/// Stack of linear layers with SiLU between them and no activation on the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer size including input and output.
    /// With `zero_head` the last layer starts at exactly zero.
    pub fn init(rng: &mut impl Rng, widths: &[usize], zero_head: bool) -> Self {
        let n = widths.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| {
                if zero_head && i + 1 == n {
                    Linear::zeros(widths[i], widths[i + 1])
                } else {
                    Linear::init(rng, widths[i], widths[i + 1])
                }
            })
            .collect();
        Self { layers }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<LinearVars> {
        self.layers.iter().map(|l| l.bind(g, trainable)).collect()
    }

    pub fn forward(g: &mut Graph, vars: &[LinearVars], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in vars.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < vars.len() {
                h = g.silu(h)?;
            }
        }
        Ok(h)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_forward_by_hand() {
        let l = Linear {
            w: Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, -1.0]]).unwrap(),
            b: Tensor::vector(vec![0.5, 1.0]),
        };
        let mut g = Graph::new();
        let v = l.bind(&mut g, false);
        let x = g.constant(Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap());
        let y = v.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[11.5, -3.0]);
    }

    #[test]
    fn zero_head_outputs_zero() {
        let mlp = Mlp::init(&mut rng::stream(1, "t"), &[3, 5, 4], true);
        let mut g = Graph::new();
        let vars = mlp.bind(&mut g, false);
        let x = g.constant(Tensor::ones(&[2, 3]));
        let y = Mlp::forward(&mut g, &vars, x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 4]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
