//! Finite-difference oracle shared by the integration tests. Deliberately
//! independent of the library's own finite-difference helpers.
#![allow(dead_code)]

use nitp_core::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod model_fd;
pub mod ops;

pub const STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// `max |a − b| / (1 + |b|)` elementwise.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / (1.0 + y.abs())).fold(0.0, f64::max)
}

pub fn max_abs_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + step;
            let hi = f(&xp);
            xp[i] = x[i] - step;
            let lo = f(&xp);
            xp[i] = x[i];
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

pub type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Scalar probe `Σ out ⊙ W` with fixed random `W`, so every output entry
/// contributes with its own weight.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let mut r = rng(seed);
    let w = g.constant(&uniform(&mut r, &shape, -1.0, 1.0));
    let p = g.mul(out, w).unwrap();
    g.sum(p).unwrap()
}

fn eval(inputs: &[Tensor], build: &Build<'_>, seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t)).collect();
    let out = build(&mut g, &vars).unwrap();
    let p = probe(&mut g, out, seed);
    g.scalar(p)
}

/// Autodiff gradients of the probe with respect to each input that is
/// marked differentiable.
pub fn autodiff(inputs: &[Tensor], diff: &[bool], build: &Build<'_>, seed: u64) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(diff)
        .map(|(t, &d)| if d { g.param(t) } else { g.constant(t) })
        .collect();
    let out = build(&mut g, &vars).unwrap();
    let p = probe(&mut g, out, seed);
    g.backward(p).unwrap();
    vars.iter()
        .zip(diff)
        .filter(|(_, &d)| d)
        .map(|(&v, _)| g.grad_tensor(v).into_data())
        .collect()
}

/// Finite-difference gradients matching [`autodiff`].
pub fn numeric(inputs: &[Tensor], diff: &[bool], build: &Build<'_>, seed: u64, step: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for (i, &d) in diff.iter().enumerate() {
        if !d {
            continue;
        }
        let mut f = |x: &[f64]| {
            let mut ins = inputs.to_vec();
            ins[i] = Tensor::new(inputs[i].shape().to_vec(), x.to_vec()).unwrap();
            eval(&ins, build, seed)
        };
        out.push(central_diff(&mut f, inputs[i].data(), step));
    }
    out
}

/// Worst `(relative, absolute)` error between autodiff and finite
/// differences over all differentiable inputs.
pub fn grad_check(inputs: &[Tensor], diff: &[bool], build: &Build<'_>, seed: u64) -> (f64, f64) {
    let a = autodiff(inputs, diff, build, seed);
    let n = numeric(inputs, diff, build, seed, STEP);
    a.iter().zip(&n).fold((0.0, 0.0), |(r, m), (x, y)| (r.max(rel_err(x, y)), m.max(max_abs_err(x, y))))
}
