use serde::{Deserialize, Serialize};

use super::{Result, TransformerError};

/// Encoder dimensions shared by every model kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Depth of the monolithic baselines.
    pub n_layers_monolithic: usize,
    /// Encoder layers per module.
    pub k_layers: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub init_std: f64,
    /// Std of the word, segment and position tables and of the grid
    /// feature projection.
    pub embed_std: f64,
    /// Size of the learned position table for program tokens.
    pub max_positions: usize,
    pub n_segments: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            n_layers_monolithic: 4,
            k_layers: 1,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
            embed_std: 1.0,
            max_positions: 64,
            n_segments: 2,
        }
    }
}

impl ModelConfig {
    /// Full-size dimensions: 768 wide, 12 heads, 12 monolithic layers.
    pub fn full_scale() -> Self {
        Self {
            d_model: 768,
            n_heads: 12,
            d_ff: 3072,
            n_layers_monolithic: 12,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TransformerError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.d_model.is_multiple_of(4) {
            return bad(format!(
                "d_model {} must be divisible by 4 for the 2-D position encoding",
                self.d_model
            ));
        }
        if self.k_layers == 0 || self.n_layers_monolithic == 0 {
            return bad("k_layers and n_layers_monolithic must be at least 1".into());
        }
        if self.d_ff == 0 || self.max_positions == 0 || self.n_segments == 0 {
            return bad("d_ff, max_positions and n_segments must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_std > 0.0 && self.embed_std > 0.0 && self.layer_norm_eps > 0.0) {
            return bad("init_std, embed_std and layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Scalar count of one encoder layer.
    pub fn layer_param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ff;
        // wq,bq  wk  wv,bv  wo,bo  ln1  w1,b1  w2,b2  ln2
        (d * d + d) + d * d + (d * d + d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_full_scale_are_valid() {
        ModelConfig::default().validate().unwrap();
        let p = ModelConfig::full_scale();
        p.validate().unwrap();
        assert_eq!(p.d_model / p.n_heads, 64);
    }

    #[test]
    fn rejects_indivisible_heads_and_zero_depth() {
        let c = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            k_layers: 0,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
