#![allow(dead_code)]

use lgcvd::model::{LgcModel, ModelConfig};
use lgcvd::numerics::{Array, Gradients, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut impl Rng) -> Array<f64> {
    let len = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Array::from_f64(shape.to_vec(), &data).unwrap()
}

/// Toy model in 64-bit with every parameter perturbed away from its init so
/// zero-initialized layers do not mask gradients.
pub fn jittered_toy(seed: u64) -> LgcModel<f64> {
    let mut model = LgcModel::<f64>::new(ModelConfig::toy(), seed).unwrap();
    model.params_mut().jitter(&mut rng(seed + 1), 0.2);
    model
}

/// Batched random inputs for one denoiser call.
pub struct Inputs {
    pub x_t: Array<f64>,
    pub y_m: Array<f64>,
    pub prev: Array<f64>,
    pub target: Array<f64>,
    pub t: Vec<usize>,
}

pub fn random_inputs(cfg: &ModelConfig, batch: usize, seed: u64) -> Inputs {
    let mut r = rng(seed);
    let frag = [batch, cfg.fragment_channels(), cfg.height, cfg.width];
    let cond = [batch, cfg.condition_channels(), cfg.height, cfg.width];
    Inputs {
        x_t: uniform(&frag, &mut r),
        y_m: uniform(&cond, &mut r),
        prev: uniform(&frag, &mut r),
        target: uniform(&frag, &mut r),
        t: (0..batch).map(|_| r.random_range(1..=1000)).collect(),
    }
}

/// Full-model loss: encode `prev`, denoise `x_t`, mean squared error to `target`.
pub fn model_loss(model: &LgcModel<f64>, inp: &Inputs) -> (f64, Gradients<f64>) {
    let mut g = Graph::new();
    let prev = g.constant(inp.prev.clone());
    let z = model.encode(&mut g, prev).unwrap();
    let x = g.constant(inp.x_t.clone());
    let y = g.constant(inp.y_m.clone());
    let v = model.forward(&mut g, x, &inp.t, y, z).unwrap();
    let target = g.constant(inp.target.clone());
    let loss = g.mse(v, target).unwrap();
    let value = g.value(loss).item().unwrap();
    let grads = g.backward(loss).unwrap();
    (value, grads)
}

/// Worst relative error between analytic and central-difference gradients
/// over `coords` randomly chosen parameter entries.
pub fn finite_difference_check(model: &LgcModel<f64>, inp: &Inputs, coords: usize, seed: u64) -> f64 {
    let (_, grads) = model_loss(model, inp);
    let ids: Vec<_> = model.params().ids().collect();
    let mut r = rng(seed);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let id = ids[r.random_range(0..ids.len())];
        let idx = r.random_range(0..model.params().get(id).len());
        let analytic = grads.get(id.index()).unwrap().data()[idx];
        let mut probe = model.clone();
        probe.params_mut().get_mut(id).data_mut()[idx] += h;
        let plus = model_loss(&probe, inp).0;
        probe.params_mut().get_mut(id).data_mut()[idx] -= 2.0 * h;
        let minus = model_loss(&probe, inp).0;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}
