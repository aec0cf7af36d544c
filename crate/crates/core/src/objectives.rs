//! Training objectives: next-token cross-entropy, implicit-token targets, the
//! projection head, the implicit-token loss families, and the weighted sum.
//!
//! All positions except the last of each sequence are "valid": the last
//! position has no next token, so it is dropped from both losses.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{init_swiglu, ActivationTrace, Forward, Model, ParamStore, SwigluParams};
use crate::probes::sample_pairs;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalShift {
    /// Prediction at `t` targets the shallow state at `t + 1`.
    NextToken,
    /// Prediction at `t` targets the shallow state at `t` (ablation).
    CurrentStep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    Cosine,
    Mse,
    SmoothL1,
    Kl,
    /// Penalizes cosine similarity between last hidden states of different
    /// tokens instead of predicting a target (ablation).
    GenericCosineReg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    /// Source block for targets, in `1..=num_layers`; `None` picks
    /// `round(0.2 · num_layers)` clamped to at least 1.
    pub target_layer: Option<usize>,
    pub temporal_shift: TemporalShift,
    pub loss_family: LossFamily,
    pub use_projector: bool,
    pub projector_hidden_mult: usize,
    pub stop_gradient_targets: bool,
    pub nitp_start_step: usize,
    pub kl_temperature: f64,
    pub smooth_l1_beta: f64,
    /// Pairs sampled per step by the generic cosine regularizer.
    pub reg_pairs: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda: 1.0,
            target_layer: None,
            temporal_shift: TemporalShift::NextToken,
            loss_family: LossFamily::Cosine,
            use_projector: true,
            projector_hidden_mult: 4,
            stop_gradient_targets: true,
            nitp_start_step: 0,
            kl_temperature: 1.0,
            smooth_l1_beta: 1.0,
            reg_pairs: 1024,
        }
    }
}

impl ObjectiveConfig {
    pub fn resolved_target_layer(&self, num_layers: usize) -> Result<usize> {
        match self.target_layer {
            Some(k) if (1..=num_layers).contains(&k) => Ok(k),
            Some(k) => Err(Error::config(format!("target_layer {k} outside 1..={num_layers}"))),
            None if num_layers == 0 => Err(Error::config("model has no layers to draw targets from")),
            None => Ok(((0.2 * num_layers as f64).round() as usize).max(1)),
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.loss_family != LossFamily::GenericCosineReg {
            self.resolved_target_layer(num_layers)?;
        }
        if self.use_projector && self.projector_hidden_mult == 0 {
            return Err(Error::config("projector_hidden_mult must be positive"));
        }
        if !(self.kl_temperature > 0.0) {
            return Err(Error::config("kl_temperature must be positive"));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::config("smooth_l1_beta must be positive"));
        }
        if self.reg_pairs == 0 {
            return Err(Error::config("reg_pairs must be positive"));
        }
        Ok(())
    }

    /// Whether the auxiliary term contributes at `step`.
    pub fn active_at(&self, step: usize) -> bool {
        self.lambda > 0.0 && step >= self.nitp_start_step
    }
}

/// Next-token cross-entropy over `batch = tokens.len() / seq_len` sequences:
/// logits at position `t` are scored against token `t + 1`.
pub fn ntp_loss(g: &mut Graph, logits: Var, tokens: &[usize], seq_len: usize) -> Result<Var> {
    if seq_len < 2 {
        return Err(Error::TooShort { need: 2, got: seq_len });
    }
    let (targets, mask) = shifted_targets(tokens, seq_len);
    g.cross_entropy(logits, &targets, &mask)
}

fn shifted_targets(tokens: &[usize], seq_len: usize) -> (Vec<usize>, Vec<bool>) {
    let mut targets = Vec::with_capacity(tokens.len());
    let mut mask = Vec::with_capacity(tokens.len());
    for (i, _) in tokens.iter().enumerate() {
        let t = i % seq_len;
        if t + 1 < seq_len {
            targets.push(tokens[i + 1]);
            mask.push(true);
        } else {
            targets.push(0);
            mask.push(false);
        }
    }
    (targets, mask)
}

/// Row indices of the valid prediction positions (all but the last of each
/// sequence).
pub fn valid_rows(batch: usize, seq_len: usize) -> Vec<usize> {
    (0..batch)
        .flat_map(|b| (0..seq_len.saturating_sub(1)).map(move |t| b * seq_len + t))
        .collect()
}

/// Implicit targets together with the prediction rows they pair with.
#[derive(Clone, Debug)]
pub struct ImplicitTargets {
    pub targets: Var,
    pub pred_rows: Vec<usize>,
    pub target_rows: Vec<usize>,
}

/// Reads targets from block `target_layer` of the trace.
///
/// Under [`TemporalShift::NextToken`] row `t + 1` is paired with prediction
/// position `t` for `t = 0..T-1`; under [`TemporalShift::CurrentStep`] row
/// `t` is paired with position `t` for every `t`. Targets are wrapped in a
/// stop-gradient unless `stop_gradient_targets` is off.
pub fn extract_implicit_tokens(g: &mut Graph, trace: &ActivationTrace, cfg: &ObjectiveConfig) -> Result<ImplicitTargets> {
    let layer = cfg.resolved_target_layer(trace.layers.len() - 1)?;
    let (pred_rows, target_rows) = pairing(trace.batch, trace.seq_len, cfg.temporal_shift);
    let raw = g.gather_rows(trace.layers[layer], &target_rows)?;
    let targets = if cfg.stop_gradient_targets {
        g.stop_gradient(raw)?
    } else {
        raw
    };
    Ok(ImplicitTargets {
        targets,
        pred_rows,
        target_rows,
    })
}

fn pairing(batch: usize, seq_len: usize, shift: TemporalShift) -> (Vec<usize>, Vec<usize>) {
    match shift {
        TemporalShift::NextToken => {
            let pred = valid_rows(batch, seq_len);
            let target = pred.iter().map(|r| r + 1).collect();
            (pred, target)
        }
        TemporalShift::CurrentStep => {
            let all: Vec<usize> = (0..batch * seq_len).collect();
            (all.clone(), all)
        }
    }
}

/// Trainable SwiGLU head `d → mult·d → d` applied before the implicit-token
/// loss. It is not part of the model and is dropped after training.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    params: ParamStore,
    layout: SwigluParams,
}

impl Projector {
    pub fn new(dim: usize, hidden_mult: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = init_swiglu(&mut params, &mut rng, "projector", dim, hidden_mult * dim);
        Projector { params, layout }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], h: Var) -> Result<Var> {
        let l = self.layout;
        g.swiglu(h, vars[l.w_gate], vars[l.w_up], vars[l.w_down])
    }

    /// Detached application to a single vector.
    pub fn apply(&self, h: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.iter().map(|(_, t)| g.constant(t)).collect();
        let x = g.constant(&Tensor::new([1, h.len()], h.to_vec())?);
        let y = self.forward(&mut g, &vars, x)?;
        Ok(g.value(y).to_vec())
    }
}

/// Projection head as a free function over a bound projector.
pub fn projection_head(g: &mut Graph, projector: &Projector, vars: &[Var], h: Var) -> Result<Var> {
    projector.forward(g, vars, h)
}

/// Mean over rows of the per-row implicit-token loss.
///
/// cosine: `1 − cos(pred_i, target_i)`; mse: `‖pred_i − target_i‖² / d`;
/// smooth_l1: elementwise Huber with `smooth_l1_beta`; kl:
/// `KL(softmax(target/τ) ‖ softmax(pred/τ))` over the feature axis.
pub fn nitp_loss(g: &mut Graph, pred: Var, targets: Var, family: LossFamily, cfg: &ObjectiveConfig) -> Result<Var> {
    match family {
        LossFamily::Cosine => {
            let c = g.cosine_rows(pred, targets)?;
            let m = g.mean(c)?;
            g.affine(m, -1.0, 1.0)
        }
        LossFamily::Mse => {
            let diff = g.sub(pred, targets)?;
            let sq = g.mul(diff, diff)?;
            g.mean(sq)
        }
        LossFamily::SmoothL1 => {
            let diff = g.sub(pred, targets)?;
            let h = g.smooth_l1(diff, cfg.smooth_l1_beta)?;
            g.mean(h)
        }
        LossFamily::Kl => {
            let rows = g.value(pred).len() / g.shape(pred).last().copied().unwrap_or(1);
            let inv_t = 1.0 / cfg.kl_temperature;
            let t = g.scale(targets, inv_t)?;
            let p = g.softmax(t)?;
            let log_p = g.log_softmax(t)?;
            let q = g.scale(pred, inv_t)?;
            let log_q = g.log_softmax(q)?;
            let diff = g.sub(log_p, log_q)?;
            let prod = g.mul(p, diff)?;
            let s = g.sum(prod)?;
            g.scale(s, 1.0 / rows as f64)
        }
        LossFamily::GenericCosineReg => Err(Error::config(
            "generic_cosine_reg has no prediction target; use generic_cosine_regularizer",
        )),
    }
}

/// `ntp + λ·nitp` once `step >= start_step`, otherwise `ntp` itself.
pub fn total_loss(g: &mut Graph, ntp: Var, nitp: Option<Var>, lambda: f64, step: usize, start_step: usize) -> Result<Var> {
    match nitp {
        Some(aux) if lambda > 0.0 && step >= start_step => {
            let weighted = g.scale(aux, lambda)?;
            g.add(ntp, weighted)
        }
        _ => Ok(ntp),
    }
}

/// Mean cosine similarity over `num_pairs` distinct-row pairs of `states`
/// (all pairs when `num_pairs` covers them).
pub fn generic_cosine_regularizer(g: &mut Graph, states: Var, num_pairs: usize, rng: &mut impl Rng) -> Result<Var> {
    let rows = g.shape(states).first().copied().unwrap_or(1);
    if rows < 2 {
        return Err(Error::TooShort { need: 2, got: rows });
    }
    let pairs = sample_pairs(rows, num_pairs, rng);
    let (left, right): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
    let a = g.gather_rows(states, &left)?;
    let b = g.gather_rows(states, &right)?;
    let c = g.cosine_rows(a, b)?;
    g.mean(c)
}

/// How implicit targets enter the graph for one step.
#[derive(Clone, Copy, Debug)]
pub enum TargetSource<'a> {
    /// Read from the current forward pass.
    Live,
    /// Constant values standing in for the targets (rows in pairing order).
    Frozen(&'a Tensor),
}

#[derive(Clone, Debug)]
pub struct LossTerms {
    pub forward: Forward,
    pub total: Var,
    pub ntp: Var,
    /// Auxiliary term, present only when it contributes at this step.
    pub nitp: Option<Var>,
    /// Mean cosine between (projected) predictions and targets.
    pub alignment: Option<f64>,
    pub targets: Option<Var>,
}

/// Everything bound into one graph for a training step.
pub struct Bound<'a> {
    pub model: &'a Model,
    pub model_vars: &'a [Var],
    pub projector: Option<(&'a Projector, &'a [Var])>,
}

/// Forward pass plus every loss term for one batch.
///
/// With `objective = None`, or when the auxiliary term is gated off at
/// `step`, no auxiliary machinery is added to the graph.
#[allow(clippy::too_many_arguments)]
pub fn compute_losses(
    g: &mut Graph,
    bound: &Bound<'_>,
    objective: Option<&ObjectiveConfig>,
    tokens: &[usize],
    seq_len: usize,
    step: usize,
    source: TargetSource<'_>,
    rng: &mut impl Rng,
) -> Result<LossTerms> {
    let forward = bound.model.forward(g, bound.model_vars, tokens, seq_len)?;
    let ntp = ntp_loss(g, forward.logits, tokens, seq_len)?;
    let Some(cfg) = objective.filter(|c| c.active_at(step)) else {
        return Ok(LossTerms {
            forward,
            total: ntp,
            ntp,
            nitp: None,
            alignment: None,
            targets: None,
        });
    };
    let trace = &forward.trace;
    let (aux, alignment, targets) = if cfg.loss_family == LossFamily::GenericCosineReg {
        let rows = valid_rows(trace.batch, trace.seq_len);
        let states = g.gather_rows(trace.final_hidden, &rows)?;
        (generic_cosine_regularizer(g, states, cfg.reg_pairs, rng)?, None, None)
    } else {
        let implicit = extract_implicit_tokens(g, trace, cfg)?;
        let targets = match source {
            TargetSource::Live => implicit.targets,
            TargetSource::Frozen(t) => {
                if t.shape() != g.shape(implicit.targets) {
                    return Err(Error::Shape {
                        op: "frozen targets",
                        lhs: g.shape(implicit.targets).to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                g.constant(t)
            }
        };
        let h = g.gather_rows(trace.final_hidden, &implicit.pred_rows)?;
        let pred = match (cfg.use_projector, bound.projector) {
            (true, Some((p, vars))) => p.forward(g, vars, h)?,
            (true, None) => return Err(Error::config("use_projector is set but no projector was bound")),
            (false, _) => h,
        };
        let aux = nitp_loss(g, pred, targets, cfg.loss_family, cfg)?;
        let alignment = mean_row_cosine(&g.tensor(pred), &g.tensor(targets));
        (aux, alignment, Some(targets))
    };
    let total = total_loss(g, ntp, Some(aux), cfg.lambda, step, cfg.nitp_start_step)?;
    Ok(LossTerms {
        forward,
        total,
        ntp,
        nitp: Some(aux),
        alignment,
        targets,
    })
}

/// Mean row-wise cosine, `None` if any row has zero norm.
pub fn mean_row_cosine(a: &Tensor, b: &Tensor) -> Option<f64> {
    let rows = a.rows();
    let mut sum = 0.0;
    for r in 0..rows {
        let (x, y) = (a.row(r), b.row(r));
        let (nx, ny) = (tensor::norm(x), tensor::norm(y));
        if nx == 0.0 || ny == 0.0 {
            return None;
        }
        sum += tensor::dot(x, y) / (nx * ny);
    }
    Some(sum / rows as f64)
}
