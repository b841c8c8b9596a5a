#![allow(dead_code)]

use dmn_core::tensor::{Graph, ParameterStore, Tensor, Var};
use dmn_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in ±scale, kept at least `margin` away from zero so relu kinks are avoided.
pub fn random_tensor(shape: &[usize], scale: f64, margin: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(margin..scale);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences of a scalar-valued graph builder against the tape's adjoints,
/// for every entry of every input. Returns the worst relative error.
pub fn check_inputs(
    inputs: &[Tensor],
    h: f64,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.input(t.clone()).unwrap()).collect();
        let out = build(&mut g, &vs).unwrap();
        g.scalar_value(out)
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.input(t.clone()).unwrap()).collect();
    let out = build(&mut g, &vs).unwrap();
    let grads = g.backward(out, &ParameterStore::new()).unwrap();

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vs[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Central differences w.r.t. every trainable parameter entry.
pub fn check_params(
    store: &ParameterStore,
    h: f64,
    build: impl Fn(&mut Graph, &ParameterStore) -> Result<Var>,
) -> Vec<(String, f64)> {
    let eval = |s: &ParameterStore| -> f64 {
        let mut g = Graph::new();
        let out = build(&mut g, s).unwrap();
        g.scalar_value(out)
    };
    let mut g = Graph::new();
    let out = build(&mut g, store).unwrap();
    let grads = g.backward(out, store).unwrap();
    let mut report = Vec::new();
    for name in store.names().map(str::to_string).collect::<Vec<_>>() {
        if !store.is_trainable(&name) {
            continue;
        }
        let analytic = grads.param(&name).unwrap().clone();
        let base = store.get(&name).unwrap().clone();
        let mut worst: f64 = 0.0;
        for j in 0..base.len() {
            let mut s = store.clone();
            let mut t = base.clone();
            t.data_mut()[j] += h;
            s.set(&name, t).unwrap();
            let fp = eval(&s);
            let mut t = base.clone();
            t.data_mut()[j] -= h;
            s.set(&name, t).unwrap();
            let fm = eval(&s);
            worst = worst.max(rel_err(analytic.data()[j], (fp - fm) / (2.0 * h)));
        }
        report.push((name, worst));
    }
    report
}
