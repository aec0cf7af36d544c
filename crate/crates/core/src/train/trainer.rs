//! The training loop.

use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{compute_losses, extract_implicit_tokens, Bound, LossFamily, Projector, TargetSource};
use crate::probes::snapshot_trace;
use crate::tensor::Tensor;
use crate::train::checkpoint::{checkpoint_dir, Checkpoint};
use crate::train::config::RunConfig;
use crate::train::data::{load_corpus, Batcher};
use crate::train::metrics::{MetricsRecord, MetricsWriter};
use crate::train::optim::{adamw_step, clip_grad_norm, AdamState};
use crate::train::schedule::wsd_lr;

/// Keeps the projector's initialization off the model's random stream, so
/// adding or removing the head never changes the model's weights.
const PROJECTOR_SEED_SALT: u64 = 0x9d1f_3a2b_77c4_0e15;
const REGULARIZER_SEED_SALT: u64 = 0x51ab_e6c0_d3f2_8847;

pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug)]
pub struct Trainer {
    run: RunConfig,
    model: Model,
    projector: Option<Projector>,
    adam: AdamState,
    batcher: Batcher,
    step: usize,
}

impl Trainer {
    /// Fresh run reading `run.corpus`.
    pub fn new(run: RunConfig) -> Result<Self> {
        let tokens = load_corpus(&run.corpus)?;
        Self::with_tokens(run, tokens)
    }

    /// Fresh run over an in-memory token stream.
    pub fn with_tokens(run: RunConfig, tokens: Vec<usize>) -> Result<Self> {
        run.validate()?;
        let model = Model::new(run.model.clone())?;
        let projector = run.has_projector().then(|| {
            let obj = run.objective.as_ref().expect("has_projector implies an objective");
            Projector::new(run.model.hidden_dim, obj.projector_hidden_mult, run.model.seed ^ PROJECTOR_SEED_SALT)
        });
        let adam = AdamState::new(param_tensors(&model, projector.as_ref()));
        let batcher = Batcher::new(tokens, run.train.batch_size, run.train.seq_len, run.train.seed)?;
        Ok(Trainer {
            run,
            model,
            projector,
            adam,
            batcher,
            step: 0,
        })
    }

    /// Continues from a checkpoint directory. The run config stored there is
    /// used unless `run` overrides it.
    pub fn resume(run: Option<RunConfig>, dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load(dir)?;
        let run = run
            .or_else(|| ck.run.clone())
            .ok_or_else(|| Error::config(format!("no run config given and none stored in {}", dir.display())))?;
        let tokens = load_corpus(&run.corpus)?;
        Self::from_checkpoint(run, ck, tokens)
    }

    pub fn from_checkpoint(run: RunConfig, ck: Checkpoint, tokens: Vec<usize>) -> Result<Self> {
        let mut t = Self::with_tokens(run, tokens)?;
        if ck.model.config() != t.model.config() {
            return Err(Error::config("checkpoint model config differs from the run config"));
        }
        if ck.projector.is_some() != t.projector.is_some() || ck.adam.m.len() != t.adam.m.len() {
            return Err(Error::config("checkpoint parameter set differs from the run config"));
        }
        t.model = ck.model;
        t.projector = ck.projector;
        t.adam = ck.adam;
        t.step = ck.step;
        Ok(t)
    }

    pub fn run_config(&self) -> &RunConfig {
        &self.run
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn projector(&self) -> Option<&Projector> {
        self.projector.as_ref()
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Completed updates.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            model: self.model.clone(),
            projector: self.projector.clone(),
            adam: self.adam.clone(),
            run: Some(self.run.clone()),
        }
    }

    /// Detached implicit targets for the upcoming step's batch, or `None`
    /// when the auxiliary term has no targets at this step.
    pub fn implicit_targets(&mut self) -> Result<Option<Tensor>> {
        let Some(obj) = self.run.objective.as_ref().filter(|o| o.active_at(self.step)) else {
            return Ok(None);
        };
        if obj.loss_family == LossFamily::GenericCosineReg {
            return Ok(None);
        }
        let tokens = self.batcher.batch(self.step);
        let mut g = Graph::new();
        let vars = self.model.params().bind(&mut g);
        let fwd = self.model.forward(&mut g, &vars, &tokens, self.run.train.seq_len)?;
        let targets = extract_implicit_tokens(&mut g, &fwd.trace, obj)?;
        Ok(Some(g.tensor(targets.targets)))
    }

    /// One update with live targets.
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        self.train_step_with(TargetSource::Live)
    }

    /// One update: forward, losses, backward, clip, AdamW.
    pub fn train_step_with(&mut self, source: TargetSource<'_>) -> Result<MetricsRecord> {
        let step = self.step;
        let cfg = &self.run.train;
        let tokens = self.batcher.batch(step);
        let mut g = Graph::new();
        let model_vars = self.model.params().bind(&mut g);
        let proj_vars = self.projector.as_ref().map(|p| p.params().bind(&mut g));
        let bound = Bound {
            model: &self.model,
            model_vars: &model_vars,
            projector: self.projector.as_ref().zip(proj_vars.as_deref()),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ REGULARIZER_SEED_SALT);
        rng.set_stream(step as u64);
        let terms = match compute_losses(
            &mut g,
            &bound,
            self.run.objective.as_ref(),
            &tokens,
            cfg.seq_len,
            step,
            source,
            &mut rng,
        ) {
            Ok(t) => t,
            // An op refused non-finite input: same failure as a non-finite loss.
            Err(Error::NonFinite(_)) => return Err(self.abort_non_finite(step)),
            Err(e) => return Err(e),
        };
        let total = g.scalar(terms.total);
        if !total.is_finite() {
            return Err(self.abort_non_finite(step));
        }
        let ntp_loss = g.scalar(terms.ntp);
        let nitp_loss = terms.nitp.map(|v| g.scalar(v));
        if let (Some(obj), Some(aux), Some(s)) = (&self.run.objective, nitp_loss, terms.alignment) {
            if obj.loss_family == LossFamily::Cosine {
                debug_assert!((1.0 - aux - s).abs() <= 1e-12, "alignment {s} vs 1 - loss {}", 1.0 - aux);
            }
        }
        let snapshot = if cfg.snapshot_every > 0 && (step % cfg.snapshot_every == 0 || step + 1 == cfg.total_steps) {
            Some(snapshot_trace(&g, &terms.forward.trace, step, &cfg.probe())?)
        } else {
            None
        };

        g.backward(terms.total)?;
        let mut grads = self.model.params().collect_grads(&g, &model_vars);
        let mut names: Vec<String> = self.model.params().iter().map(|(n, _)| n.to_string()).collect();
        if let (Some(p), Some(vars)) = (&self.projector, &proj_vars) {
            grads.extend(p.params().collect_grads(&g, vars));
            names.extend(p.params().iter().map(|(n, _)| n.to_string()));
        }
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let grad_norm = clip_grad_norm(&mut grads, &name_refs, cfg.grad_clip)?;
        let lr = wsd_lr(step, cfg)?;
        let adamw = cfg.adamw();
        let mut params: Vec<&mut Tensor> = self.model.params_mut().tensors_mut().iter_mut().collect();
        if let Some(p) = self.projector.as_mut() {
            params.extend(p.params_mut().tensors_mut().iter_mut());
        }
        adamw_step(&mut params, &grads, &mut self.adam, lr, &adamw)?;
        self.step += 1;

        let mut record = MetricsRecord {
            step,
            lr,
            ntp_loss,
            nitp_loss,
            total_loss: total,
            grad_norm,
            cosine_alignment: terms.alignment,
            effective_rank: None,
            avg_cosine: None,
            num_tokens: None,
            num_pairs: None,
            router_entropy: None,
        };
        let entropy = &terms.forward.trace.router_entropy;
        if !entropy.is_empty() {
            record.router_entropy = Some(entropy.iter().sum::<f64>() / entropy.len() as f64);
        }
        if let Some(s) = &snapshot {
            record.attach(s);
        }
        Ok(record)
    }

    fn abort_non_finite(&self, step: usize) -> Error {
        let root = self.run.output_dir.clone().unwrap_or_else(std::env::temp_dir);
        let dir = root.join(format!("diagnostic-{step:06}"));
        match self.checkpoint().save(&dir) {
            Ok(()) => Error::NonFiniteLoss { step, checkpoint: dir },
            Err(e) => e,
        }
    }

    fn should_log(&self, r: &MetricsRecord) -> bool {
        r.step % self.run.train.log_every == 0 || r.has_snapshot() || r.step + 1 == self.run.train.total_steps
    }

    /// Trains to `total_steps`, returning the logged records. With an
    /// `output_dir`, records go to `metrics.jsonl` there and checkpoints to
    /// `ckpt-NNNNNN/` every `checkpoint_every` steps and at the end.
    pub fn run_to_end(&mut self) -> Result<Vec<MetricsRecord>> {
        let out = self.run.output_dir.clone();
        let mut writer = match &out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(METRICS_FILE);
                Some(if self.step > 0 && path.exists() {
                    MetricsWriter::resume(&path, self.step)?
                } else {
                    MetricsWriter::create(&path)?
                })
            }
            None => None,
        };
        let mut logged = Vec::new();
        let total = self.run.train.total_steps;
        while self.step < total {
            let r = self.train_step()?;
            if self.should_log(&r) {
                if let Some(w) = writer.as_mut() {
                    w.append(&r)?;
                }
                if r.step % 100 == 0 || r.step + 1 == total {
                    info!(
                        "step {} lr {:.3e} ntp {:.4} total {:.4} align {:?}",
                        r.step, r.lr, r.ntp_loss, r.total_loss, r.cosine_alignment
                    );
                }
                logged.push(r);
            }
            if let Some(dir) = &out {
                let every = self.run.train.checkpoint_every;
                if self.step == total || (every > 0 && self.step % every == 0) {
                    self.checkpoint().save(&checkpoint_dir(dir, self.step))?;
                }
            }
        }
        if let Some(w) = writer.as_mut() {
            w.flush()?;
        }
        Ok(logged)
    }
}

fn param_tensors<'a>(model: &'a Model, projector: Option<&'a Projector>) -> impl Iterator<Item = &'a Tensor> {
    let head = projector.into_iter().flat_map(|p| p.params().iter().map(|(_, t)| t));
    model.params().iter().map(|(_, t)| t).chain(head)
}

/// Trains a fresh run end to end and returns the last logged record.
pub fn train(run: &RunConfig) -> Result<MetricsRecord> {
    let mut t = Trainer::new(run.clone())?;
    t.run_to_end()?.pop().ok_or_else(|| Error::config("run logged no records"))
}

/// Path of the metrics log for a run, if it writes one.
pub fn metrics_path(run: &RunConfig) -> Option<PathBuf> {
    run.output_dir.as_ref().map(|d| d.join(METRICS_FILE))
}
