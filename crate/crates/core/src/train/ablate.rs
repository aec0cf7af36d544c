//! Paired configurations along one ablation axis.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{LossFamily, ObjectiveConfig, TemporalShift};
use crate::train::compare::RunSummary;
use crate::train::config::RunConfig;
use crate::train::trainer::Trainer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    TargetLayer,
    Shift,
    Loss,
    Lambda,
    StartStep,
    Projector,
    Sg,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "target_layer" => AblationAxis::TargetLayer,
            "shift" => AblationAxis::Shift,
            "loss" => AblationAxis::Loss,
            "lambda" => AblationAxis::Lambda,
            "start_step" => AblationAxis::StartStep,
            "projector" => AblationAxis::Projector,
            "sg" => AblationAxis::Sg,
            other => return Err(Error::config(format!("unknown ablation axis `{other}`"))),
        })
    }
}

/// A plain next-token baseline followed by one variant per setting of
/// `axis`; every other field comes from `base` (its objective, or the
/// defaults if it has none).
pub fn ablation_variants(base: &RunConfig, axis: AblationAxis) -> Vec<(String, RunConfig)> {
    let obj = base.objective.clone().unwrap_or_default();
    let with = |label: String, o: ObjectiveConfig| {
        let mut run = base.clone();
        run.objective = Some(o);
        (label, run)
    };
    let mut out = vec![{
        let mut run = base.clone();
        run.objective = None;
        ("ntp".to_string(), run)
    }];
    match axis {
        AblationAxis::TargetLayer => {
            for k in 1..=base.model.num_layers {
                out.push(with(format!("target_layer={k}"), ObjectiveConfig { target_layer: Some(k), ..obj.clone() }));
            }
        }
        AblationAxis::Shift => {
            for (name, s) in [("next_token", TemporalShift::NextToken), ("current_step", TemporalShift::CurrentStep)] {
                out.push(with(format!("shift={name}"), ObjectiveConfig { temporal_shift: s, ..obj.clone() }));
            }
        }
        AblationAxis::Loss => {
            for (name, f) in [
                ("cosine", LossFamily::Cosine),
                ("mse", LossFamily::Mse),
                ("smooth_l1", LossFamily::SmoothL1),
                ("kl", LossFamily::Kl),
                ("generic_cosine_reg", LossFamily::GenericCosineReg),
            ] {
                out.push(with(format!("loss={name}"), ObjectiveConfig { loss_family: f, ..obj.clone() }));
            }
        }
        AblationAxis::Lambda => {
            for l in [0.1, 0.5, 1.0, 2.0] {
                out.push(with(format!("lambda={l}"), ObjectiveConfig { lambda: l, ..obj.clone() }));
            }
        }
        AblationAxis::StartStep => {
            let total = base.train.total_steps;
            for s in [0, total / 4, total / 2] {
                out.push(with(format!("start_step={s}"), ObjectiveConfig { nitp_start_step: s, ..obj.clone() }));
            }
        }
        AblationAxis::Projector => {
            for p in [true, false] {
                out.push(with(format!("projector={p}"), ObjectiveConfig { use_projector: p, ..obj.clone() }));
            }
        }
        AblationAxis::Sg => {
            for sg in [true, false] {
                out.push(with(format!("sg={sg}"), ObjectiveConfig { stop_gradient_targets: sg, ..obj.clone() }));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub label: String,
    pub summary: RunSummary,
}

/// Trains every variant. With an output directory on `base`, variant `x`
/// writes under `<output_dir>/<axis>/<x>/`.
pub fn run_ablation(base: &RunConfig, axis: AblationAxis, tokens: &[usize]) -> Result<Vec<AblationResult>> {
    let axis_name = serde_json::to_value(axis)?.as_str().unwrap_or("axis").to_string();
    let mut results = Vec::new();
    for (label, mut run) in ablation_variants(base, axis) {
        if let Some(out) = &base.output_dir {
            run.output_dir = Some(Path::new(out).join(&axis_name).join(&label));
        }
        let records = Trainer::with_tokens(run, tokens.to_vec())?.run_to_end()?;
        let summary = RunSummary::of(&records).ok_or_else(|| Error::config("variant logged no records"))?;
        results.push(AblationResult { label, summary });
    }
    Ok(results)
}
