//! Per-token training FLOPs for the baseline objective and the extra cost of
//! the implicit-token head.
//!
//! Every matrix with `P` parameters costs `6P` FLOPs per token in training
//! (forward plus backward). Attention has about `3d²` parameters under
//! grouped-query attention, an activated SwiGLU expert `3·d·d_e`, the
//! unembedding `V·d`. The input embedding is a lookup and costs nothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub d: u64,
    pub layers: u64,
    pub vocab: u64,
    /// Experts active per token, shared experts included.
    #[serde(default = "one")]
    pub activated_experts: u64,
    #[serde(default)]
    pub expert_dim: u64,
    /// Set for a dense model; replaces the expert term with `18·d·d_ffn`.
    #[serde(default)]
    pub dense_ffn_dim: Option<u64>,
}

fn one() -> u64 {
    1
}

impl ArchSpec {
    pub fn moe(d: u64, layers: u64, vocab: u64, activated_experts: u64, expert_dim: u64) -> Self {
        ArchSpec {
            d,
            layers,
            vocab,
            activated_experts,
            expert_dim,
            dense_ffn_dim: None,
        }
    }

    pub fn dense(d: u64, layers: u64, vocab: u64, ffn_dim: u64) -> Self {
        ArchSpec {
            d,
            layers,
            vocab,
            activated_experts: 1,
            expert_dim: ffn_dim,
            dense_ffn_dim: Some(ffn_dim),
        }
    }

    /// `layers` may be zero; every width must be positive.
    pub fn validate(&self) -> Result<()> {
        let widths = match self.dense_ffn_dim {
            Some(f) => [self.d, self.vocab, 1, f],
            None => [self.d, self.vocab, self.activated_experts, self.expert_dim],
        };
        if widths.contains(&0) {
            return Err(Error::config(format!("architecture widths must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `(k, width)` of the activated feed-forward path.
    fn ffn_shape(&self) -> (u64, u64) {
        match self.dense_ffn_dim {
            Some(f) => (1, f),
            None => (self.activated_experts, self.expert_dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    /// Per layer.
    pub attention_flops: u64,
    /// Per layer.
    pub ffn_flops: u64,
    /// `layers · (attention + ffn)`.
    pub backbone_flops: u64,
    pub unembedding_flops: u64,
    pub baseline_total: u64,
    pub nitp_projection_flops: u64,
    pub nitp_cosine_flops: u64,
    pub nitp_overhead: u64,
    pub overhead_ratio: f64,
}

/// Baseline terms only; the implicit-token fields are zero.
pub fn ntp_train_flops(spec: &ArchSpec) -> Result<FlopsBreakdown> {
    spec.validate()?;
    let d = spec.d;
    let (k, width) = spec.ffn_shape();
    let attention_flops = 18 * d * d;
    let ffn_flops = 18 * k * d * width;
    let backbone_flops = spec.layers * (attention_flops + ffn_flops);
    let unembedding_flops = 6 * spec.vocab * d;
    Ok(FlopsBreakdown {
        attention_flops,
        ffn_flops,
        backbone_flops,
        unembedding_flops,
        baseline_total: backbone_flops + unembedding_flops,
        nitp_projection_flops: 0,
        nitp_cosine_flops: 0,
        nitp_overhead: 0,
        overhead_ratio: 0.0,
    })
}

/// `(72d², 18d)`: a `d → 4d → d` SwiGLU head has `12d²` parameters, and the
/// cosine costs about `6d` forward, tripled for training.
pub fn nitp_overhead_flops(spec: &ArchSpec) -> Result<(u64, u64)> {
    spec.validate()?;
    Ok((72 * spec.d * spec.d, 18 * spec.d))
}

pub fn overhead_ratio(spec: &ArchSpec) -> Result<f64> {
    Ok(full_breakdown(spec)?.overhead_ratio)
}

/// Baseline plus overhead, with the ratio filled in.
pub fn full_breakdown(spec: &ArchSpec) -> Result<FlopsBreakdown> {
    let mut b = ntp_train_flops(spec)?;
    let (projection, cosine) = nitp_overhead_flops(spec)?;
    if b.baseline_total == 0 {
        return Err(Error::config("baseline FLOPs are zero"));
    }
    b.nitp_projection_flops = projection;
    b.nitp_cosine_flops = cosine;
    b.nitp_overhead = projection + cosine;
    b.overhead_ratio = b.nitp_overhead as f64 / b.baseline_total as f64;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn large() -> ArchSpec {
        ArchSpec::moe(1280, 24, 152_064, 9, 640)
    }

    #[test]
    fn large_moe_terms() {
        let b = full_breakdown(&large()).unwrap();
        // 24·(18·1280² + 18·9·1280·640)
        assert_eq!(b.backbone_flops, 24 * (29_491_200 + 132_710_400));
        assert_eq!(b.unembedding_flops, 6 * 152_064 * 1280);
        assert_eq!(b.nitp_overhead, 72 * 1280 * 1280 + 18 * 1280);
        assert!((b.overhead_ratio - 0.023).abs() < 0.001);
    }

    #[test]
    fn zero_depth_is_unembedding_only() {
        let b = ntp_train_flops(&ArchSpec::moe(64, 0, 256, 2, 32)).unwrap();
        assert_eq!(b.baseline_total, 6 * 256 * 64);
    }

    #[test]
    fn doubling_width_quadruples_attention() {
        let a = ntp_train_flops(&ArchSpec::moe(64, 2, 256, 2, 32)).unwrap();
        let b = ntp_train_flops(&ArchSpec::moe(128, 2, 256, 2, 32)).unwrap();
        assert_eq!(b.attention_flops, 4 * a.attention_flops);
    }

    #[test]
    fn unit_width_overhead() {
        assert_eq!(nitp_overhead_flops(&ArchSpec::moe(1, 1, 1, 1, 1)).unwrap(), (72, 18));
    }

    #[test]
    fn overhead_ignores_everything_but_width() {
        let base = nitp_overhead_flops(&ArchSpec::moe(96, 2, 256, 1, 8)).unwrap();
        for spec in [
            ArchSpec::moe(96, 30, 256, 1, 8),
            ArchSpec::moe(96, 2, 50_000, 1, 8),
            ArchSpec::moe(96, 2, 256, 7, 300),
            ArchSpec::dense(96, 2, 256, 384),
        ] {
            assert_eq!(nitp_overhead_flops(&spec).unwrap(), base);
        }
    }

    #[test]
    fn dense_variant_uses_ffn_width() {
        let b = ntp_train_flops(&ArchSpec::dense(64, 3, 256, 256)).unwrap();
        assert_eq!(b.ffn_flops, 18 * 64 * 256);
        assert_eq!(b.baseline_total, 3 * (18 * 64 * 64 + 18 * 64 * 256) + 6 * 256 * 64);
    }

    #[test]
    fn zero_width_is_rejected() {
        assert!(ntp_train_flops(&ArchSpec::moe(0, 2, 256, 1, 8)).is_err());
        assert!(ntp_train_flops(&ArchSpec::moe(8, 2, 256, 0, 8)).is_err());
    }

    #[test]
    fn parses_from_toml() {
        let spec: ArchSpec = toml::from_str("d = 1280\nlayers = 24\nvocab = 152064\nactivated_experts = 9\nexpert_dim = 640\n").unwrap();
        assert_eq!(spec, large());
    }
}
