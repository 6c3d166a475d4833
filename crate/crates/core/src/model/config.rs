use serde::{Deserialize, Serialize};

use crate::corpus::NUM_TYPES;
use crate::diffcore::Float;
use crate::error::{Error, Result};

/// Number of distance buckets produced by [`super::distance_bucket`].
pub const N_DIST_BUCKETS: usize = 10;
/// Region ids: above the diagonal, on it, below it.
pub const N_REGION_IDS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_type: usize,
    pub d_lstm: usize,
    pub d_biaffine: usize,
    pub d_h: usize,
    pub d_dist: usize,
    pub d_region: usize,
    pub d_g: usize,
    pub dropout: Float,
    pub n_classes: usize,
    pub n_dist_buckets: usize,
    pub n_region_ids: usize,
    pub max_len: usize,
    pub use_biaffine: bool,
    pub use_mlp_branch: bool,
    pub use_dconv: bool,
    pub use_region_emb: bool,
    pub use_distance_emb: bool,
    /// Divide the loss by N² (every grid cell) instead of the number of
    /// supervised cells.
    pub full_grid_loss: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            d_type: 16,
            d_lstm: 32,
            d_biaffine: 32,
            d_h: 64,
            d_dist: 20,
            d_region: 20,
            d_g: 64,
            dropout: 0.1,
            n_classes: NUM_TYPES + 1,
            n_dist_buckets: N_DIST_BUCKETS,
            n_region_ids: N_REGION_IDS,
            max_len: 200,
            use_biaffine: true,
            use_mlp_branch: true,
            use_dconv: true,
            use_region_emb: true,
            use_distance_emb: true,
            full_grid_loss: false,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for tests and smoke runs.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            d_type: 8,
            d_lstm: 8,
            d_biaffine: 8,
            d_h: 8,
            d_dist: 4,
            d_region: 4,
            d_g: 8,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("d_type", self.d_type),
            ("d_lstm", self.d_lstm),
            ("d_biaffine", self.d_biaffine),
            ("d_h", self.d_h),
            ("d_dist", self.d_dist),
            ("d_region", self.d_region),
            ("d_g", self.d_g),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes must be at least 2"));
        }
        if self.n_dist_buckets != N_DIST_BUCKETS || self.n_region_ids != N_REGION_IDS {
            return Err(Error::config(format!(
                "distance buckets and region ids are fixed at {N_DIST_BUCKETS} and {N_REGION_IDS}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.use_biaffine && !self.use_mlp_branch {
            return Err(Error::config("at least one of use_biaffine and use_mlp_branch must be enabled"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn guards() {
        let both_off = ModelConfig {
            use_biaffine: false,
            use_mlp_branch: false,
            ..ModelConfig::tiny()
        };
        assert!(matches!(both_off.validate(), Err(Error::Config(_))));
        let bad_dropout = ModelConfig {
            dropout: 1.0,
            ..ModelConfig::tiny()
        };
        assert!(bad_dropout.validate().is_err());
        let zero = ModelConfig {
            d_g: 0,
            ..ModelConfig::tiny()
        };
        assert!(zero.validate().is_err());
        let heads = ModelConfig {
            n_heads: 3,
            ..ModelConfig::tiny()
        };
        assert!(heads.validate().is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: ModelConfig = serde_json::from_str(r#"{"d_model": 32, "use_dconv": false}"#).unwrap();
        assert_eq!(c.d_model, 32);
        assert!(!c.use_dconv);
        assert_eq!(c.n_layers, 2);
    }
}
