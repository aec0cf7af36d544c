//! AdamW with decoupled weight decay and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to matrix parameters only; norm gains are not decayed.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of updates taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let zeros: Vec<Vec<f64>> = params.into_iter().map(|p| vec![0.0; p.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected AdamW update. Decay is decoupled: `θ ← θ − lr·wd·θ`
/// before the adaptive step, on tensors of rank 2 only.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Shape {
            op: "adamw_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.m.len()],
        });
    }
    for (i, p) in params.iter().enumerate() {
        let n = p.numel();
        if grads[i].len() != n || state.m[i].len() != n || state.v[i].len() != n {
            return Err(Error::Shape {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: vec![grads[i].len()],
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let decay = if p.shape().len() == 2 { lr * cfg.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *theta -= decay * *theta;
            *theta -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scales every gradient by `max_norm / norm` when the global ℓ2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], names: &[&str], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (i, g) in grads.iter().enumerate() {
        if g.iter().any(|x| !x.is_finite()) {
            let name = names.get(i).map_or_else(|| format!("#{i}"), |n| n.to_string());
            return Err(Error::NonFiniteGradient(name));
        }
        sq += g.iter().map(|x| x * x).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        grads.iter_mut().flatten().for_each(|x| *x *= c);
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            weight_decay: wd,
            ..Default::default()
        }
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = Tensor::new([2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new([&p]);
        for _ in 0..5 {
            adamw_step(&mut [&mut p], &[vec![0.0; 4]], &mut st, 0.1, &cfg(0.0)).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn decay_shrinks_matrices_only() {
        let mut w = Tensor::new([1, 2], vec![1.0, -4.0]).unwrap();
        let mut gain = Tensor::new([2], vec![1.0, 1.0]).unwrap();
        let mut st = AdamState::new([&w, &gain]);
        let lr = 0.05;
        for k in 1..=3 {
            adamw_step(&mut [&mut w, &mut gain], &[vec![0.0; 2], vec![0.0; 2]], &mut st, lr, &cfg(0.1)).unwrap();
            let f = (1.0 - lr * 0.1f64).powi(k);
            assert!((w.data()[0] - f).abs() < 1e-15);
            assert!((w.data()[1] + 4.0 * f).abs() < 1e-14);
        }
        assert_eq!(gain.data(), &[1.0, 1.0]);
    }

    #[test]
    fn scalar_quadratic_converges() {
        for beta2 in [0.95, 0.999] {
            let mut p = Tensor::new([1], vec![1.0]).unwrap();
            let c = AdamWConfig {
                beta2,
                ..cfg(0.0)
            };
            let mut st = AdamState::new([&p]);
            for _ in 0..500 {
                let g = 2.0 * p.data()[0];
                adamw_step(&mut [&mut p], &[vec![g]], &mut st, 0.1, &c).unwrap();
            }
            assert!(p.data()[0].abs() < 1e-3, "beta2 {beta2}: {}", p.data()[0]);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::zeros([3]);
        let mut st = AdamState::new([&p]);
        assert!(adamw_step(&mut [&mut p], &[vec![0.0; 2]], &mut st, 0.1, &cfg(0.0)).is_err());
    }

    #[test]
    fn clipping() {
        let mut small = vec![vec![0.3], vec![0.4]];
        assert_eq!(clip_grad_norm(&mut small, &[], 1.0).unwrap(), 0.5);
        assert_eq!(small, vec![vec![0.3], vec![0.4]]);

        let mut big = vec![vec![2.4, 0.0], vec![3.2]];
        let pre = clip_grad_norm(&mut big, &[], 1.0).unwrap();
        assert!((pre - 4.0).abs() < 1e-15);
        let after: f64 = big.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
        assert!((big[0][0] / 2.4 - big[1][0] / 3.2).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut g = vec![vec![1.0], vec![f64::NAN]];
        match clip_grad_norm(&mut g, &["a", "layers.0.wq"], 1.0) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "layers.0.wq"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
