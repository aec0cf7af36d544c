//! Random-input sweeps for every differentiable operation, shared by the op
//! tests and the acceptance run.

use nitp_core::autograd::AttentionShape;
use nitp_core::{Graph, Result, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{grad_check, rng, uniform};

pub const CASES: u64 = 20;
/// Relative tolerance every operation must meet.
pub const REL_TOL: f64 = 1e-5;

pub type Case = (Vec<Tensor>, Vec<bool>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

pub struct OpSweep {
    pub name: &'static str,
    /// Absolute tolerance, for operations that state one.
    pub abs_tol: Option<f64>,
    pub make: Box<dyn Fn(&mut ChaCha8Rng) -> Case>,
}

#[derive(Clone, Copy, Debug)]
pub struct SweepResult {
    pub rel: f64,
    pub abs: f64,
}

impl SweepResult {
    pub fn passes(&self, op: &OpSweep) -> bool {
        self.rel <= REL_TOL && op.abs_tol.is_none_or(|t| self.abs <= t)
    }
}

/// Worst errors over `CASES` random instances.
pub fn run(op: &OpSweep) -> SweepResult {
    let mut worst = SweepResult { rel: 0.0, abs: 0.0 };
    for seed in 0..CASES {
        let mut r = rng(seed * 7919 + op.name.len() as u64);
        let (inputs, diff, build) = (op.make)(&mut r);
        let (rel, abs) = grad_check(&inputs, &diff, build.as_ref(), seed);
        worst.rel = worst.rel.max(rel);
        worst.abs = worst.abs.max(abs);
    }
    worst
}

pub fn mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    uniform(r, &[rows, cols], -1.5, 1.5)
}

fn op(name: &'static str, abs_tol: Option<f64>, make: impl Fn(&mut ChaCha8Rng) -> Case + 'static) -> OpSweep {
    OpSweep {
        name,
        abs_tol,
        make: Box::new(make),
    }
}

pub fn all() -> Vec<OpSweep> {
    let attn = AttentionShape {
        seq_len: 3,
        num_q_heads: 4,
        num_kv_heads: 2,
        head_dim: 2,
    };
    vec![
        op("matmul", Some(1e-7), |r| {
            (vec![mat(r, 4, 5), mat(r, 5, 3)], vec![true, true], Box::new(|g, v| g.matmul(v[0], v[1])))
        }),
        op("matmul_nt", None, |r| {
            (vec![mat(r, 4, 5), mat(r, 3, 5)], vec![true, true], Box::new(|g, v| g.matmul_nt(v[0], v[1])))
        }),
        op("add", None, |r| (vec![mat(r, 3, 4), mat(r, 3, 4)], vec![true, true], Box::new(|g, v| g.add(v[0], v[1])))),
        op("sub", None, |r| (vec![mat(r, 3, 4), mat(r, 3, 4)], vec![true, true], Box::new(|g, v| g.sub(v[0], v[1])))),
        op("mul", None, |r| (vec![mat(r, 3, 4), mat(r, 3, 4)], vec![true, true], Box::new(|g, v| g.mul(v[0], v[1])))),
        op("affine", None, |r| (vec![mat(r, 2, 5)], vec![true], Box::new(|g, v| g.affine(v[0], -0.7, 0.3)))),
        op("scale", None, |r| (vec![mat(r, 2, 5)], vec![true], Box::new(|g, v| g.scale(v[0], 2.5)))),
        op("silu", None, |r| (vec![uniform(r, &[3, 4], -4.0, 4.0)], vec![true], Box::new(|g, v| g.silu(v[0])))),
        op("smooth_l1", None, |r| {
            (vec![uniform(r, &[4, 6], -3.0, 3.0)], vec![true], Box::new(|g, v| g.smooth_l1(v[0], 1.0)))
        }),
        op("sum", None, |r| (vec![mat(r, 3, 3)], vec![true], Box::new(|g, v| g.sum(v[0])))),
        op("mean", None, |r| (vec![mat(r, 3, 3)], vec![true], Box::new(|g, v| g.mean(v[0])))),
        op("reshape", None, |r| (vec![mat(r, 2, 6)], vec![true], Box::new(|g, v| g.reshape(v[0], vec![3, 4])))),
        op("softmax", Some(1e-7), |r| {
            (vec![uniform(r, &[1, 8], -3.0, 3.0)], vec![true], Box::new(|g, v| g.softmax(v[0])))
        }),
        op("softmax_rows", None, |r| {
            (vec![uniform(r, &[3, 5], -3.0, 3.0)], vec![true], Box::new(|g, v| g.softmax(v[0])))
        }),
        op("log_softmax", None, |r| {
            (vec![uniform(r, &[3, 5], -3.0, 3.0)], vec![true], Box::new(|g, v| g.log_softmax(v[0])))
        }),
        op("cross_entropy", Some(1e-7), |r| {
            let targets: Vec<usize> = (0..3).map(|_| r.gen_range(0..7)).collect();
            let mask = vec![true, r.gen_bool(0.5), true];
            let logits = uniform(r, &[3, 7], -2.0, 2.0);
            (vec![logits], vec![true], Box::new(move |g, v| g.cross_entropy(v[0], &targets, &mask)))
        }),
        op("rmsnorm", Some(1e-7), |r| {
            (vec![mat(r, 3, 6), uniform(r, &[6], 0.5, 1.5)], vec![true, true], Box::new(|g, v| g.rmsnorm(v[0], v[1])))
        }),
        op("swiglu", Some(1e-7), |r| {
            (
                vec![mat(r, 2, 4), mat(r, 4, 8), mat(r, 4, 8), mat(r, 8, 4)],
                vec![true; 4],
                Box::new(|g, v| g.swiglu(v[0], v[1], v[2], v[3])),
            )
        }),
        op("cosine_similarity", Some(1e-8), |r| {
            (vec![mat(r, 1, 6), mat(r, 1, 6)], vec![true, true], Box::new(|g, v| g.cosine_similarity(v[0], v[1])))
        }),
        op("cosine_rows", None, |r| {
            (vec![mat(r, 4, 5), mat(r, 4, 5)], vec![true, true], Box::new(|g, v| g.cosine_rows(v[0], v[1])))
        }),
        op("gather_rows", None, |r| {
            let idx: Vec<usize> = (0..6).map(|_| r.gen_range(0..4)).collect();
            (vec![mat(r, 4, 3)], vec![true], Box::new(move |g, v| g.gather_rows(v[0], &idx)))
        }),
        op("scatter_add_rows", None, |r| {
            let idx: Vec<usize> = (0..5).map(|_| r.gen_range(0..3)).collect();
            (vec![mat(r, 5, 2)], vec![true], Box::new(move |g, v| g.scatter_add_rows(v[0], &idx, 3)))
        }),
        op("scale_rows", None, |r| {
            (vec![mat(r, 4, 3), uniform(r, &[4], -1.0, 1.0)], vec![true, true], Box::new(|g, v| g.scale_rows(v[0], v[1])))
        }),
        op("column", None, |r| (vec![mat(r, 4, 3)], vec![true], Box::new(|g, v| g.column(v[0], 1)))),
        op("topk_softmax", None, |r| (vec![mat(r, 5, 4)], vec![true], Box::new(|g, v| g.topk_softmax(v[0], 2)))),
        op("causal_attention", None, move |r| {
            (
                vec![mat(r, 6, 8), mat(r, 6, 4), mat(r, 6, 4)],
                vec![true; 3],
                Box::new(move |g, v| g.causal_attention(v[0], v[1], v[2], attn)),
            )
        }),
    ]
}
