use rand::Rng;

use super::{Denoiser, DiffusionConfig, NoiseSchedule};
use crate::adam::AdamState;
use crate::concepts::{perturb_embedding, ConceptSet};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor};

/// Fits the denoiser to `E‖ε̂ − ε‖²` over the base concepts. Returns the loss
/// of every step.
pub fn train_base(
    model: &mut Denoiser,
    concepts: &ConceptSet,
    schedule: &NoiseSchedule,
    cfg: &DiffusionConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let bases: Vec<_> = concepts.bases().collect();
    if bases.is_empty() {
        return Err(Error::invalid("base training needs at least one concept"));
    }
    let mut rng = rng::stream(seed, "base/train");
    let mut adam = AdamState::new(cfg.adam);
    let n = cfg.batch;
    let dim = model.shape().data_dim;
    let e = concepts.embed_dim;
    let mut losses = Vec::with_capacity(cfg.train_steps);
    for _ in 0..cfg.train_steps {
        let mut z0 = Vec::with_capacity(n * dim);
        let mut c = Vec::with_capacity(n * e);
        let mut t = Vec::with_capacity(n);
        for _ in 0..n {
            let concept = bases[rng.random_range(0..bases.len())];
            for j in 0..dim {
                z0.push(concept.mode.mean[j] + concept.mode.sigma * rng::normal(&mut rng));
            }
            let aug = rng.random::<f64>() < cfg.p_syn_aug;
            let drop = rng.random::<f64>() < cfg.p_uncond;
            if drop {
                c.extend_from_slice(&concepts.null_embedding);
            } else if aug {
                c.extend(perturb_embedding(&concept.embedding, concepts.sigma_syn, &mut rng));
            } else {
                c.extend_from_slice(&concept.embedding);
            }
            t.push(rng.random_range(1..=schedule.steps()));
        }
        let z0 = Tensor::new(vec![n, dim], z0)?;
        let c = Tensor::new(vec![n, e], c)?;
        let eps = Tensor::new(vec![n, dim], rng::normals(&mut rng, n * dim))?;
        let zt = schedule.forward_diffuse(&z0, &t, &eps)?;

        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let pred = model.forward(&mut g, &vars, None, &zt, &t, &c)?;
        let target = g.constant(eps);
        let loss = g.mse(pred, target)?;
        losses.push(g.value(loss).item());
        let grads = g.backward(loss)?;
        let grads: Vec<Tensor> = vars
            .all()
            .into_iter()
            .map(|v| grads.get_or_zeros(&g, v))
            .collect::<std::result::Result<_, _>>()?;
        adam.step(&mut model.tensors_mut(), &grads)?;
    }
    Ok(losses)
}
