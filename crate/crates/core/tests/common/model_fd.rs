//! Whole-model finite-difference check on the joint objective.

use nitp_core::model::{FfnKind, Model, ModelConfig};
use nitp_core::objectives::{compute_losses, Bound, ObjectiveConfig, Projector, TargetSource};
use nitp_core::{Graph, Tensor, Var};
use rand::Rng;

use super::{central_diff, rel_err, rng};

pub fn small(ffn_kind: FfnKind) -> ModelConfig {
    ModelConfig {
        vocab_size: 13,
        hidden_dim: 16,
        num_layers: 2,
        num_q_heads: 4,
        num_kv_heads: 2,
        head_dim: 4,
        ffn_kind,
        dense_ffn_dim: 24,
        num_experts: 4,
        experts_per_token: 2,
        expert_ffn_dim: 8,
        max_seq_len: 8,
        seed: 3,
    }
}

/// Joint objective with the projector, evaluated at the given parameters.
/// Targets are held fixed, matching the stop-gradient in the analytic pass.
fn objective_value(model: &Model, projector: &Projector, targets: &Tensor, tokens: &[usize], seq_len: usize) -> f64 {
    let mut g = Graph::new();
    let mv: Vec<Var> = model.params().iter().map(|(_, t)| g.constant(t)).collect();
    let pv: Vec<Var> = projector.params().iter().map(|(_, t)| g.constant(t)).collect();
    let bound = Bound {
        model,
        model_vars: &mv,
        projector: Some((projector, &pv)),
    };
    let obj = ObjectiveConfig::default();
    let terms = compute_losses(&mut g, &bound, Some(&obj), tokens, seq_len, 0, TargetSource::Frozen(targets), &mut rng(0)).unwrap();
    g.scalar(terms.total)
}

/// Worst relative error between autodiff and central differences over every
/// model and projector parameter, with the parameter that attains it.
pub fn worst_relative_error(kind: FfnKind) -> (f64, String) {
    let mut model = Model::new(small(kind)).unwrap();
    // Give the norm gains some spread so their gradients are not symmetric.
    let mut r = rng(17);
    for t in model.params_mut().tensors_mut() {
        if t.shape().len() == 1 {
            t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(0.6..1.4));
        } else {
            t.data_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
    }
    let projector = Projector::new(16, 4, 9);
    let seq_len = 5;
    let tokens: Vec<usize> = (0..2 * seq_len).map(|_| r.gen_range(0..13)).collect();

    let mut g = Graph::new();
    let mv = model.params().bind(&mut g);
    let pv = projector.params().bind(&mut g);
    let bound = Bound {
        model: &model,
        model_vars: &mv,
        projector: Some((&projector, &pv)),
    };
    let obj = ObjectiveConfig::default();
    let terms = compute_losses(&mut g, &bound, Some(&obj), &tokens, seq_len, 0, TargetSource::Live, &mut rng(0)).unwrap();
    g.backward(terms.total).unwrap();
    let analytic = model.params().collect_grads(&g, &mv);
    let targets = g.tensor(terms.targets.unwrap());
    assert_eq!(objective_value(&model, &projector, &targets, &tokens, seq_len), g.scalar(terms.total));

    let mut worst = (0.0f64, String::new());
    for i in 0..model.params().len() {
        let base = model.params().get(i).data().to_vec();
        let mut f = |x: &[f64]| {
            let mut m = model.clone();
            m.params_mut().get_mut(i).data_mut().copy_from_slice(x);
            objective_value(&m, &projector, &targets, &tokens, seq_len)
        };
        let numeric = central_diff(&mut f, &base, super::STEP);
        let e = rel_err(&analytic[i], &numeric);
        if e > worst.0 {
            worst = (e, model.params().name(i).to_string());
        }
    }
    let analytic = projector.params().collect_grads(&g, &pv);
    for i in 0..projector.params().len() {
        let base = projector.params().get(i).data().to_vec();
        let mut f = |x: &[f64]| {
            let mut p = projector.clone();
            p.params_mut().get_mut(i).data_mut().copy_from_slice(x);
            objective_value(&model, &p, &targets, &tokens, seq_len)
        };
        let numeric = central_diff(&mut f, &base, super::STEP);
        let e = rel_err(&analytic[i], &numeric);
        if e > worst.0 {
            worst = (e, projector.params().name(i).to_string());
        }
    }
    worst
}

