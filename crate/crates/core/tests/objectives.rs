//! Objective wiring: target extraction, stop-gradient contract, gradient
//! routing between the two losses, gating, and the pairwise regularizer.

mod common;

use common::{central_diff, rel_err, rng, uniform};
use nitp_core::model::{Model, ModelConfig};
use nitp_core::objectives::*;
use nitp_core::train::{adamw_step, AdamState, AdamWConfig};
use nitp_core::{Graph, Tensor, Var};

fn toy() -> Model {
    Model::new(ModelConfig {
        vocab_size: 17,
        hidden_dim: 16,
        num_layers: 3,
        num_q_heads: 4,
        num_kv_heads: 2,
        head_dim: 4,
        dense_ffn_dim: 32,
        max_seq_len: 8,
        seed: 21,
        ..Default::default()
    })
    .unwrap()
}

const TOKENS: [usize; 12] = [3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8];
const SEQ: usize = 6;

struct Grads {
    model: Vec<Vec<f64>>,
    projector: Vec<Vec<f64>>,
    total: f64,
    targets: Option<Tensor>,
}

/// Backpropagates the term picked by `pick` from one loss evaluation.
fn grads_of(
    model: &Model,
    projector: &Projector,
    obj: Option<&ObjectiveConfig>,
    step: usize,
    source: TargetSource<'_>,
    pick: impl Fn(&LossTerms) -> Var,
) -> Grads {
    let mut g = Graph::new();
    let mv = model.params().bind(&mut g);
    let pv = projector.params().bind(&mut g);
    let bound = Bound {
        model,
        model_vars: &mv,
        projector: Some((projector, &pv)),
    };
    let terms = compute_losses(&mut g, &bound, obj, &TOKENS, SEQ, step, source, &mut rng(0)).unwrap();
    let root = pick(&terms);
    g.backward(root).unwrap();
    Grads {
        model: model.params().collect_grads(&g, &mv),
        projector: projector.params().collect_grads(&g, &pv),
        total: g.scalar(terms.total),
        targets: terms.targets.map(|t| g.tensor(t)),
    }
}

fn total_grads(model: &Model, projector: &Projector, obj: Option<&ObjectiveConfig>, step: usize, source: TargetSource<'_>) -> Grads {
    grads_of(model, projector, obj, step, source, |t| t.total)
}

fn is_zero(g: &[Vec<f64>]) -> bool {
    g.iter().flatten().all(|&v| v == 0.0)
}

#[test]
fn next_token_targets_are_the_following_rows() {
    let model = toy();
    let mut g = Graph::new();
    let vars = model.params().bind(&mut g);
    let tokens = [2, 7, 11];
    let fwd = model.forward(&mut g, &vars, &tokens, 3).unwrap();
    let cfg = ObjectiveConfig {
        target_layer: Some(2),
        ..Default::default()
    };
    let it = extract_implicit_tokens(&mut g, &fwd.trace, &cfg).unwrap();
    let layer = g.tensor(fwd.trace.layers[2]);
    let targets = g.tensor(it.targets);
    assert_eq!(targets.shape(), &[2, 16]);
    assert_eq!(targets.row(0), layer.row(1));
    assert_eq!(targets.row(1), layer.row(2));
    assert_eq!(it.pred_rows, vec![0, 1]);

    let current = ObjectiveConfig {
        temporal_shift: TemporalShift::CurrentStep,
        ..cfg
    };
    let it = extract_implicit_tokens(&mut g, &fwd.trace, &current).unwrap();
    assert_eq!(g.tensor(it.targets).row(2), layer.row(2));
    assert_eq!(it.pred_rows, it.target_rows);

    let bad = ObjectiveConfig {
        target_layer: Some(4),
        ..Default::default()
    };
    assert!(extract_implicit_tokens(&mut g, &fwd.trace, &bad).is_err());
}

#[test]
fn stop_gradient_equals_frozen_constants_exactly() {
    let model = toy();
    let projector = Projector::new(16, 4, 2);
    let obj = ObjectiveConfig::default();
    let live = total_grads(&model, &projector, Some(&obj), 0, TargetSource::Live);
    let frozen_targets = live.targets.clone().unwrap();
    let frozen = total_grads(&model, &projector, Some(&obj), 0, TargetSource::Frozen(&frozen_targets));
    assert_eq!(live.total, frozen.total);
    assert_eq!(live.model, frozen.model);
    assert_eq!(live.projector, frozen.projector);
}

#[test]
fn without_stop_gradient_shallow_gradients_change() {
    let model = toy();
    let projector = Projector::new(16, 4, 2);
    let obj = ObjectiveConfig {
        stop_gradient_targets: false,
        ..Default::default()
    };
    let live = total_grads(&model, &projector, Some(&obj), 0, TargetSource::Live);
    let frozen_targets = live.targets.clone().unwrap();
    let frozen = total_grads(&model, &projector, Some(&obj), 0, TargetSource::Frozen(&frozen_targets));
    assert_eq!(live.total, frozen.total);
    let differs = (0..model.params().len())
        .filter(|&i| model.params().name(i).starts_with("layers.0."))
        .any(|i| live.model[i] != frozen.model[i]);
    assert!(differs);
}

#[test]
fn each_loss_reaches_only_its_parameters() {
    let model = toy();
    let projector = Projector::new(16, 4, 2);
    let obj = ObjectiveConfig::default();
    let unembed = model.unembed_index();
    let backbone = model.params().index_of("layers.0.wq").unwrap();

    let ntp_only = grads_of(&model, &projector, Some(&obj), 0, TargetSource::Live, |t| t.ntp);
    assert!(is_zero(&ntp_only.projector));
    assert!(ntp_only.model[unembed].iter().any(|&v| v != 0.0));

    let nitp_only = grads_of(&model, &projector, Some(&obj), 0, TargetSource::Live, |t| t.nitp.unwrap());
    assert!(nitp_only.model[unembed].iter().all(|&v| v == 0.0));
    assert!(!is_zero(&nitp_only.projector));
    assert!(nitp_only.model[backbone].iter().any(|&v| v != 0.0));
    assert!(ntp_only.model[backbone].iter().any(|&v| v != 0.0));
}

#[test]
fn zero_lambda_is_the_baseline_bit_for_bit() {
    let model = toy();
    let projector = Projector::new(16, 4, 2);
    let obj = ObjectiveConfig {
        lambda: 0.0,
        ..Default::default()
    };
    let with = total_grads(&model, &projector, Some(&obj), 0, TargetSource::Live);
    let without = total_grads(&model, &projector, None, 0, TargetSource::Live);
    assert_eq!(with.total, without.total);
    assert_eq!(with.model, without.model);
    assert!(is_zero(&with.projector));
}

#[test]
fn gated_steps_match_the_baseline() {
    let model = toy();
    let projector = Projector::new(16, 4, 2);
    let obj = ObjectiveConfig {
        nitp_start_step: 10,
        ..Default::default()
    };
    let baseline = total_grads(&model, &projector, None, 9, TargetSource::Live);
    let early = total_grads(&model, &projector, Some(&obj), 9, TargetSource::Live);
    assert_eq!(early.model, baseline.model);
    let on = total_grads(&model, &projector, Some(&obj), 10, TargetSource::Live);
    assert_ne!(on.model, baseline.model);
}

#[test]
fn swapping_adjacent_targets_changes_the_loss() {
    let model = toy();
    let projector = Projector::new(16, 4, 2);
    let obj = ObjectiveConfig::default();
    let live = total_grads(&model, &projector, Some(&obj), 0, TargetSource::Live);
    let targets = live.targets.unwrap();
    let mut swapped = targets.clone();
    let d = targets.cols();
    // Swap the targets of the first two positions of the first sequence.
    let (a, b) = (targets.row(0).to_vec(), targets.row(1).to_vec());
    swapped.data_mut()[..d].copy_from_slice(&b);
    swapped.data_mut()[d..2 * d].copy_from_slice(&a);
    let other = total_grads(&model, &projector, Some(&obj), 0, TargetSource::Frozen(&swapped));
    assert_ne!(other.total, live.total);
}

#[test]
fn every_family_trains_through_the_full_pipeline() {
    let model = toy();
    let projector = Projector::new(16, 4, 2);
    for family in [LossFamily::Cosine, LossFamily::Mse, LossFamily::SmoothL1, LossFamily::Kl, LossFamily::GenericCosineReg] {
        let obj = ObjectiveConfig {
            loss_family: family,
            ..Default::default()
        };
        let gr = total_grads(&model, &projector, Some(&obj), 0, TargetSource::Live);
        assert!(gr.total.is_finite(), "{family:?}");
        assert!(gr.model.iter().flatten().all(|v| v.is_finite()));
        assert_eq!(is_zero(&gr.projector), family == LossFamily::GenericCosineReg, "{family:?}");
    }
}

#[test]
fn projection_head_basics() {
    let p = Projector::new(6, 4, 3);
    assert_eq!(p.parameter_count(), 12 * 36);
    assert!(p.apply(&[0.0; 6]).unwrap().iter().all(|&v| v == 0.0));

    // Gradient with respect to the input, through the head and a cosine.
    let mut r = rng(8);
    let h = uniform(&mut r, &[3, 6], -1.0, 1.0);
    let z = uniform(&mut r, &[3, 6], -1.0, 1.0);
    let loss = |h: &Tensor| -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let vars = p.params().bind(&mut g);
        let hv = g.param(h);
        let zv = g.constant(&z);
        let out = projection_head(&mut g, &p, &vars, hv).unwrap();
        let l = nitp_loss(&mut g, out, zv, LossFamily::Cosine, &ObjectiveConfig::default()).unwrap();
        g.backward(l).unwrap();
        (g.scalar(l), g.grad_tensor(hv).into_data())
    };
    let (_, analytic) = loss(&h);
    let numeric = central_diff(&mut |x| loss(&Tensor::new(vec![3, 6], x.to_vec()).unwrap()).0, h.data(), common::STEP);
    assert!(rel_err(&analytic, &numeric) <= 1e-5);
}

#[test]
fn regularizer_matches_all_pairs_on_eight_rows() {
    let x = uniform(&mut rng(9), &[8, 5], -1.0, 1.0);
    let mut brute = 0.0;
    for i in 0..8 {
        for j in i + 1..8 {
            let (a, b) = (x.row(i), x.row(j));
            let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            let na = a.iter().map(|p| p * p).sum::<f64>().sqrt();
            let nb = b.iter().map(|p| p * p).sum::<f64>().sqrt();
            brute += dot / (na * nb);
        }
    }
    brute /= 28.0;
    let mut g = Graph::new();
    let s = g.constant(&x);
    let reg = generic_cosine_regularizer(&mut g, s, 1024, &mut rng(0)).unwrap();
    assert!((g.scalar(reg) - brute).abs() <= 1e-12);
    let one = g.constant(&Tensor::zeros([1, 5]));
    assert!(generic_cosine_regularizer(&mut g, one, 4, &mut rng(0)).is_err());
}

#[test]
fn memorizes_a_repeated_sequence() {
    let mut model = Model::new(ModelConfig {
        vocab_size: 8,
        hidden_dim: 16,
        num_layers: 1,
        num_q_heads: 2,
        num_kv_heads: 1,
        head_dim: 8,
        dense_ffn_dim: 32,
        max_seq_len: 16,
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let tokens: Vec<usize> = (0..16).map(|i| [1, 4, 2, 7][i % 4]).collect();
    let mut state = AdamState::new(model.params().iter().map(|(_, t)| t));
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        let mut g = Graph::new();
        let vars = model.params().bind(&mut g);
        let fwd = model.forward(&mut g, &vars, &tokens, 16).unwrap();
        let loss = ntp_loss(&mut g, fwd.logits, &tokens, 16).unwrap();
        last = g.scalar(loss);
        g.backward(loss).unwrap();
        let grads = model.params().collect_grads(&g, &vars);
        let mut params: Vec<&mut Tensor> = model.params_mut().tensors_mut().iter_mut().collect();
        adamw_step(&mut params, &grads, &mut state, 1e-2, &cfg).unwrap();
    }
    assert!(last < 0.1, "{last}");
}
