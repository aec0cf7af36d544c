//! Checkpoint directories.
//!
//! `model.nt` holds the model weights in `f32` with the model config echoed
//! in its manifest; it is all `probe` needs. `state.nt` holds the same
//! weights in `f64` plus the projection head and optimizer moments, so a
//! resumed run continues bit for bit. `run.toml` records the run config.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::Projector;
use crate::tensor::Tensor;
use crate::tensorfile::{DType, TensorFile};
use crate::train::config::RunConfig;
use crate::train::optim::AdamState;

pub const MODEL_FILE: &str = "model.nt";
pub const STATE_FILE: &str = "state.nt";
pub const RUN_FILE: &str = "run.toml";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Number of completed updates.
    pub step: usize,
    pub model: Model,
    pub projector: Option<Projector>,
    /// Moments for the model parameters followed by the projector's.
    pub adam: AdamState,
    pub run: Option<RunConfig>,
}

pub fn checkpoint_dir(root: &Path, step: usize) -> PathBuf {
    root.join(format!("ckpt-{step:06}"))
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.to_tensor_file()?.save(&dir.join(MODEL_FILE), DType::F32)?;

        let mut state = self.model.to_tensor_file()?;
        state.tensors.clear();
        state.push_meta("step", self.step.to_string());
        state.push_meta("adam_t", self.adam.t.to_string());
        for (n, t) in self.model.params().iter() {
            state.push_tensor(format!("model.{n}"), t.clone());
        }
        if let Some(p) = &self.projector {
            let d = self.model.config().hidden_dim;
            let hidden = p.params().get(0).cols();
            state.push_meta("projector.hidden_mult", (hidden / d).to_string());
            for (n, t) in p.params().iter() {
                state.push_tensor(n, t.clone());
            }
        }
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            state.push_tensor(format!("adam.m.{i}"), Tensor::new([m.len()], m.clone())?);
            state.push_tensor(format!("adam.v.{i}"), Tensor::new([v.len()], v.clone())?);
        }
        state.save(&dir.join(STATE_FILE), DType::F64)?;

        if let Some(run) = &self.run {
            let path = dir.join(RUN_FILE);
            fs::write(&path, run.to_toml_string()?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let state = TensorFile::load(&dir.join(STATE_FILE))?;
        let config = crate::model::config_from_meta(&state)?;
        let mut model = Model::new(config)?;
        model.params_mut().load_from(&state, "model.")?;

        let parse = |key: &str| -> Result<u64> {
            state
                .meta(key)
                .ok_or_else(|| Error::format("checkpoint", format!("missing meta `{key}`")))?
                .parse()
                .map_err(|_| Error::format("checkpoint", format!("bad meta `{key}`")))
        };
        let step = parse("step")? as usize;
        let projector = match state.meta("projector.hidden_mult") {
            Some(_) => {
                let mult = parse("projector.hidden_mult")? as usize;
                let mut p = Projector::new(model.config().hidden_dim, mult, 0);
                p.params_mut().load_from(&state, "")?;
                Some(p)
            }
            None => None,
        };
        let count = model.params().len() + projector.as_ref().map_or(0, |p| p.params().len());
        let moment = |kind: &str, i: usize| -> Result<Vec<f64>> {
            let key = format!("adam.{kind}.{i}");
            state
                .tensor(&key)
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor `{key}`")))
        };
        let adam = AdamState {
            m: (0..count).map(|i| moment("m", i)).collect::<Result<_>>()?,
            v: (0..count).map(|i| moment("v", i)).collect::<Result<_>>()?,
            t: parse("adam_t")?,
        };
        let run_path = dir.join(RUN_FILE);
        let run = if run_path.exists() {
            let text = fs::read_to_string(&run_path).map_err(|e| Error::io(&run_path, e))?;
            Some(toml::from_str(&text)?)
        } else {
            None
        };
        Ok(Checkpoint {
            step,
            model,
            projector,
            adam,
            run,
        })
    }
}

/// Model weights from a checkpoint directory or a `model.nt` file.
pub fn load_model(path: &Path) -> Result<Model> {
    let file = if path.is_dir() { path.join(MODEL_FILE) } else { path.to_path_buf() };
    Model::from_tensor_file(&TensorFile::load(&file)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> Model {
        Model::new(ModelConfig {
            hidden_dim: 8,
            num_q_heads: 2,
            num_kv_heads: 1,
            head_dim: 4,
            dense_ffn_dim: 16,
            max_seq_len: 8,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn state_round_trips_exactly() {
        let model = tiny();
        let projector = Projector::new(8, 4, 3);
        let mut adam = AdamState::new(model.params().iter().map(|(_, t)| t).chain(projector.params().iter().map(|(_, t)| t)));
        adam.t = 7;
        adam.m[0][0] = 0.1 + 0.2;
        adam.v.last_mut().unwrap()[1] = 1.0 / 3.0;
        let ck = Checkpoint {
            step: 12,
            model,
            projector: Some(projector),
            adam,
            run: Some(RunConfig::new("c.txt")),
        };
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.step, 12);
        assert_eq!(back.model, ck.model);
        assert_eq!(back.projector, ck.projector);
        assert_eq!(back.adam, ck.adam);
        assert_eq!(back.run, ck.run);
        let m = load_model(dir.path()).unwrap();
        assert_eq!(m.config(), ck.model.config());
    }

    #[test]
    fn missing_state_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Io { .. })));
    }
}
