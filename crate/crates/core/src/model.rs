//! Toy decoder-only transformer.
//!
//! Pre-norm blocks (RMS norm → causal grouped-query attention → residual,
//! RMS norm → FFN → residual), learned absolute position embeddings, and an
//! untied unembedding matrix `W ∈ R^{V×d}` without bias. The FFN is either a
//! dense SwiGLU or a top-k mixture of SwiGLU experts.
//!
//! [`ActivationTrace`] exposes the residual stream after every block, which
//! is where implicit targets are read from, and the post-final-norm state
//! `h_t` that multiplies the unembedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, top_k_indices, AttentionShape, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tensorfile::TensorFile;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    Dense,
    Moe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub ffn_kind: FfnKind,
    pub dense_ffn_dim: usize,
    pub num_experts: usize,
    pub experts_per_token: usize,
    pub expert_ffn_dim: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            hidden_dim: 64,
            num_layers: 2,
            num_q_heads: 4,
            num_kv_heads: 2,
            head_dim: 16,
            ffn_kind: FfnKind::Dense,
            dense_ffn_dim: 128,
            num_experts: 4,
            experts_per_token: 2,
            expert_ffn_dim: 64,
            max_seq_len: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_q_heads", self.num_q_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        if self.num_q_heads % self.num_kv_heads != 0 {
            return Err(Error::config(format!(
                "num_q_heads ({}) must be divisible by num_kv_heads ({})",
                self.num_q_heads, self.num_kv_heads
            )));
        }
        if self.num_q_heads * self.head_dim != self.hidden_dim {
            return Err(Error::config(format!(
                "num_q_heads × head_dim = {} but hidden_dim = {}",
                self.num_q_heads * self.head_dim,
                self.hidden_dim
            )));
        }
        match self.ffn_kind {
            FfnKind::Dense if self.dense_ffn_dim == 0 => {
                return Err(Error::config("model.dense_ffn_dim must be positive"))
            }
            FfnKind::Moe => {
                if self.expert_ffn_dim == 0 {
                    return Err(Error::config("model.expert_ffn_dim must be positive"));
                }
                if self.experts_per_token == 0 || self.experts_per_token > self.num_experts {
                    return Err(Error::config(format!(
                        "experts_per_token must lie in 1..={}, got {}",
                        self.num_experts, self.experts_per_token
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn kv_dim(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Inserts every parameter into `g` as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t)).collect()
    }

    /// Gradients of the bound leaves after `g.backward`, zeros where a
    /// parameter was not reached.
    pub fn collect_grads(&self, g: &Graph, vars: &[Var]) -> Vec<Vec<f64>> {
        vars.iter().map(|&v| g.grad_tensor(v).into_data()).collect()
    }

    pub(crate) fn push_into(&self, file: &mut TensorFile, prefix: &str) {
        for (n, t) in self.iter() {
            file.push_tensor(format!("{prefix}{n}"), t.clone());
        }
    }

    /// Overwrites values from `file`, matching names under `prefix` and
    /// checking shapes.
    pub(crate) fn load_from(&mut self, file: &TensorFile, prefix: &str) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}{name}");
            let src = file
                .tensor(&key)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor `{key}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "load checkpoint",
                    lhs: t.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Parameter indices of one SwiGLU block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SwigluParams {
    pub w_gate: usize,
    pub w_up: usize,
    pub w_down: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FfnParams {
    Dense(SwigluParams),
    Moe {
        router: usize,
        experts: Vec<SwigluParams>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn_norm: usize,
    pub ffn: FfnParams,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerParams>,
    final_norm: usize,
    unembed: usize,
}

/// Per-layer residual-stream states of one forward pass.
#[derive(Clone, Debug)]
pub struct ActivationTrace {
    /// `layers[0]` is the embedding output, `layers[l]` the output of block
    /// `l`; each is `[batch·seq_len, d]`.
    pub layers: Vec<Var>,
    /// Post-final-norm states, the `h_t` that multiplies the unembedding.
    pub final_hidden: Var,
    pub batch: usize,
    pub seq_len: usize,
    /// Mean entropy of the full router softmax, one entry per MoE layer.
    pub router_entropy: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    pub trace: ActivationTrace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: [usize; 2]) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

pub(crate) fn init_swiglu(
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    hidden: usize,
) -> SwigluParams {
    SwigluParams {
        w_gate: params.push(format!("{prefix}.w_gate"), normal_tensor(rng, [d, hidden])),
        w_up: params.push(format!("{prefix}.w_up"), normal_tensor(rng, [d, hidden])),
        w_down: params.push(format!("{prefix}.w_down"), normal_tensor(rng, [hidden, d])),
    }
}

impl Model {
    /// Initializes matrices from N(0, 0.02²) with a ChaCha8 stream seeded by
    /// `config.seed`; norm gains start at 1.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden_dim;
        let mut params = ParamStore::new();
        let tok_emb = params.push("tok_emb", normal_tensor(&mut rng, [config.vocab_size, d]));
        let pos_emb = params.push("pos_emb", normal_tensor(&mut rng, [config.max_seq_len, d]));
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = format!("layers.{l}");
            let attn_norm = params.push(format!("{p}.attn_norm"), Tensor::filled([d], 1.0));
            let wq = params.push(format!("{p}.wq"), normal_tensor(&mut rng, [d, d]));
            let wk = params.push(format!("{p}.wk"), normal_tensor(&mut rng, [d, config.kv_dim()]));
            let wv = params.push(format!("{p}.wv"), normal_tensor(&mut rng, [d, config.kv_dim()]));
            let wo = params.push(format!("{p}.wo"), normal_tensor(&mut rng, [d, d]));
            let ffn_norm = params.push(format!("{p}.ffn_norm"), Tensor::filled([d], 1.0));
            let ffn = match config.ffn_kind {
                FfnKind::Dense => {
                    FfnParams::Dense(init_swiglu(&mut params, &mut rng, &format!("{p}.ffn"), d, config.dense_ffn_dim))
                }
                FfnKind::Moe => {
                    let router = params.push(format!("{p}.moe.router"), normal_tensor(&mut rng, [d, config.num_experts]));
                    let experts = (0..config.num_experts)
                        .map(|e| {
                            init_swiglu(&mut params, &mut rng, &format!("{p}.moe.experts.{e}"), d, config.expert_ffn_dim)
                        })
                        .collect();
                    FfnParams::Moe { router, experts }
                }
            };
            layers.push(LayerParams {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                ffn,
            });
        }
        let final_norm = params.push("final_norm", Tensor::filled([d], 1.0));
        let unembed = params.push("unembed", normal_tensor(&mut rng, [config.vocab_size, d]));
        Ok(Model {
            config,
            params,
            layout: Layout {
                tok_emb,
                pos_emb,
                layers,
                final_norm,
                unembed,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layer_params(&self, l: usize) -> &LayerParams {
        &self.layout.layers[l]
    }

    pub fn unembed_index(&self) -> usize {
        self.layout.unembed
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Runs `batch = tokens.len() / seq_len` sequences stored back to back.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], tokens: &[usize], seq_len: usize) -> Result<Forward> {
        let cfg = &self.config;
        if seq_len == 0 || tokens.is_empty() || tokens.len() % seq_len != 0 {
            return Err(Error::Shape {
                op: "forward",
                lhs: vec![tokens.len()],
                rhs: vec![seq_len],
            });
        }
        if seq_len > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: seq_len,
                max: cfg.max_seq_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Index {
                op: "forward",
                index: bad,
                bound: cfg.vocab_size,
            });
        }
        let lay = &self.layout;
        let batch = tokens.len() / seq_len;
        let positions: Vec<usize> = (0..tokens.len()).map(|i| i % seq_len).collect();
        let tok = g.gather_rows(vars[lay.tok_emb], tokens)?;
        let pos = g.gather_rows(vars[lay.pos_emb], &positions)?;
        let mut x = g.add(tok, pos)?;
        let mut layers = vec![x];
        let mut router_entropy = Vec::new();
        let attn = AttentionShape {
            seq_len,
            num_q_heads: cfg.num_q_heads,
            num_kv_heads: cfg.num_kv_heads,
            head_dim: cfg.head_dim,
        };
        for lp in &lay.layers {
            let h = g.rmsnorm(x, vars[lp.attn_norm])?;
            let q = g.matmul(h, vars[lp.wq])?;
            let k = g.matmul(h, vars[lp.wk])?;
            let v = g.matmul(h, vars[lp.wv])?;
            let a = g.causal_attention(q, k, v, attn)?;
            let o = g.matmul(a, vars[lp.wo])?;
            x = g.add(x, o)?;
            let h = g.rmsnorm(x, vars[lp.ffn_norm])?;
            let f = match &lp.ffn {
                FfnParams::Dense(sw) => g.swiglu(h, vars[sw.w_gate], vars[sw.w_up], vars[sw.w_down])?,
                FfnParams::Moe { router, experts } => {
                    let ex: Vec<[Var; 3]> = experts
                        .iter()
                        .map(|e| [vars[e.w_gate], vars[e.w_up], vars[e.w_down]])
                        .collect();
                    let (y, entropy) = moe_ffn_traced(g, h, vars[*router], &ex, cfg.experts_per_token)?;
                    router_entropy.push(entropy);
                    y
                }
            };
            x = g.add(x, f)?;
            layers.push(x);
        }
        let final_hidden = g.rmsnorm(x, vars[lay.final_norm])?;
        let logits = g.matmul_nt(final_hidden, vars[lay.unembed])?;
        Ok(Forward {
            logits,
            trace: ActivationTrace {
                layers,
                final_hidden,
                batch,
                seq_len,
                router_entropy,
            },
        })
    }

    /// Detached logits `[T, V]` for a single sequence.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let fwd = self.forward(&mut g, &vars, tokens, tokens.len())?;
        Ok(g.tensor(fwd.logits))
    }

    /// Checkpoint with `model.*` meta keys echoing the config.
    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut file = TensorFile::new();
        let cfg = toml::Value::try_from(&self.config)
            .map_err(|e| Error::format("model config", e.to_string()))?;
        if let toml::Value::Table(table) = cfg {
            for (k, v) in table {
                file.push_meta(format!("model.{k}"), v.to_string());
            }
        }
        self.params.push_into(&mut file, "");
        Ok(file)
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let config = config_from_meta(file)?;
        let mut model = Model::new(config)?;
        model.params.load_from(file, "")?;
        Ok(model)
    }
}

pub(crate) fn config_from_meta(file: &TensorFile) -> Result<ModelConfig> {
    let mut text = String::new();
    for (k, v) in &file.meta {
        if let Some(field) = k.strip_prefix("model.") {
            text.push_str(&format!("{field} = {v}\n"));
        }
    }
    if text.is_empty() {
        return Err(Error::format("checkpoint", "no model.* section in manifest"));
    }
    Ok(toml::from_str(&text)?)
}

/// Top-k routed mixture of SwiGLU experts.
///
/// Each token's router logits `x · router` are softmaxed over its `k`
/// highest-scoring experts; the selected experts' outputs are mixed with
/// those weights and every other expert contributes exactly zero.
pub fn moe_ffn(g: &mut Graph, x: Var, router: Var, experts: &[[Var; 3]], k: usize) -> Result<Var> {
    moe_ffn_traced(g, x, router, experts, k).map(|(y, _)| y)
}

/// [`moe_ffn`] plus the mean entropy (nats) of each token's softmax over all
/// router logits.
pub fn moe_ffn_traced(g: &mut Graph, x: Var, router: Var, experts: &[[Var; 3]], k: usize) -> Result<(Var, f64)> {
    let n_exp = experts.len();
    if k == 0 || k > n_exp {
        return Err(Error::config(format!("top-k routing needs 1 <= k <= {n_exp}, got k = {k}")));
    }
    let logits = g.matmul(x, router)?;
    let weights = g.topk_softmax(logits, k)?;
    let (rows, cols) = {
        let s = g.shape(x);
        (s[0], s[1])
    };
    let logit_vals = g.value(logits).to_vec();
    let mut routed: Vec<Vec<usize>> = vec![Vec::new(); n_exp];
    let mut entropy = 0.0;
    for r in 0..rows {
        let mut p = logit_vals[r * n_exp..(r + 1) * n_exp].to_vec();
        softmax_in_place(&mut p);
        entropy -= p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>();
        for e in top_k_indices(&logit_vals[r * n_exp..(r + 1) * n_exp], k) {
            routed[e].push(r);
        }
    }
    let mut out: Option<Var> = None;
    for (e, rows_e) in routed.iter().enumerate() {
        if rows_e.is_empty() {
            continue;
        }
        let xe = g.gather_rows(x, rows_e)?;
        let [wg, wu, wd] = experts[e];
        let ye = g.swiglu(xe, wg, wu, wd)?;
        let col = g.column(weights, e)?;
        let col = g.reshape(col, vec![rows, 1])?;
        let we = g.gather_rows(col, rows_e)?;
        let we = g.reshape(we, vec![rows_e.len()])?;
        let scaled = g.scale_rows(ye, we)?;
        let back = g.scatter_add_rows(scaled, rows_e, rows)?;
        out = Some(match out {
            Some(acc) => g.add(acc, back)?,
            None => back,
        });
    }
    let y = match out {
        Some(v) => v,
        None => g.constant(&Tensor::zeros([rows, cols])),
    };
    Ok((y, entropy / rows as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(ffn_kind: FfnKind) -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            hidden_dim: 8,
            num_layers: 2,
            num_q_heads: 2,
            num_kv_heads: 1,
            head_dim: 4,
            ffn_kind,
            dense_ffn_dim: 12,
            num_experts: 3,
            experts_per_token: 2,
            expert_ffn_dim: 6,
            max_seq_len: 8,
            seed: 5,
        }
    }

    #[test]
    fn rejects_bad_head_split() {
        let mut c = tiny(FfnKind::Dense);
        c.num_kv_heads = 3;
        assert!(matches!(Model::new(c), Err(Error::Config(_))));
        let mut c = tiny(FfnKind::Dense);
        c.head_dim = 3;
        assert!(matches!(Model::new(c), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_k_above_expert_count() {
        let mut c = tiny(FfnKind::Moe);
        c.experts_per_token = 4;
        assert!(matches!(Model::new(c), Err(Error::Config(_))));
    }

    #[test]
    fn gqa_eight_by_four_builds() {
        let mut c = tiny(FfnKind::Dense);
        c.num_q_heads = 8;
        c.num_kv_heads = 4;
        c.head_dim = 2;
        c.hidden_dim = 16;
        let m = Model::new(c).unwrap();
        assert_eq!(m.params().by_name("layers.0.wk").unwrap().shape(), &[16, 8]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(tiny(FfnKind::Moe)).unwrap();
        let b = Model::new(tiny(FfnKind::Moe)).unwrap();
        assert_eq!(a, b);
        let mut c = tiny(FfnKind::Moe);
        c.seed = 6;
        assert_ne!(a.params(), Model::new(c).unwrap().params());
    }

    #[test]
    fn single_token_gives_one_row_of_logits() {
        let m = Model::new(tiny(FfnKind::Dense)).unwrap();
        assert_eq!(m.logits(&[3]).unwrap().shape(), &[1, 11]);
    }

    #[test]
    fn forward_errors() {
        let m = Model::new(tiny(FfnKind::Dense)).unwrap();
        assert!(matches!(m.logits(&[0; 9]), Err(Error::SequenceTooLong { len: 9, max: 8 })));
        assert!(matches!(m.logits(&[0, 11]), Err(Error::Index { index: 11, .. })));
    }

    #[test]
    fn trace_layer_zero_is_embedding_and_final_feeds_unembedding() {
        let m = Model::new(tiny(FfnKind::Dense)).unwrap();
        let tokens = [1, 4, 2, 7];
        let mut g = Graph::new();
        let vars = m.params().bind(&mut g);
        let fwd = m.forward(&mut g, &vars, &tokens, 4).unwrap();
        assert_eq!(fwd.trace.layers.len(), 3);
        let emb = m.params().by_name("tok_emb").unwrap();
        let pos = m.params().by_name("pos_emb").unwrap();
        let layer0 = g.tensor(fwd.trace.layers[0]);
        for (t, &id) in tokens.iter().enumerate() {
            for j in 0..8 {
                assert_eq!(layer0.row(t)[j], emb.row(id)[j] + pos.row(t)[j]);
            }
        }
        let h = g.tensor(fwd.trace.final_hidden);
        let w = m.params().by_name("unembed").unwrap();
        let logits = g.tensor(fwd.logits);
        for t in 0..4 {
            for v in 0..11 {
                let want: f64 = (0..8).map(|j| h.row(t)[j] * w.row(v)[j]).sum();
                assert!((logits.row(t)[v] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_at_f32() {
        use crate::tensorfile::DType;
        let m = Model::new(tiny(FfnKind::Moe)).unwrap();
        let bytes = m.to_tensor_file().unwrap().to_bytes(DType::F32).unwrap();
        let back = Model::from_tensor_file(&TensorFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.config(), m.config());
        for ((_, a), (_, b)) in m.params().iter().zip(back.params().iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!((*x as f32) as f64, *y);
            }
        }
        // a second save of the loaded model is byte-identical
        let again = back.to_tensor_file().unwrap().to_bytes(DType::F32).unwrap();
        assert_eq!(bytes, again);
    }
}
