use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
///
/// The default is the reference configuration used across the synthetic
/// experiments: wide enough to solve them, small enough to train on one CPU
/// core. Head width stays at d_model / n_heads = 32; scale n_heads with
/// d_model (e.g. 8 heads at d_model 512) to keep per-head width near 64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_width: usize,
    /// Learnable proposals allocated per query slot; the decoder emits
    /// `proposals_per_query * k` candidates for a sample with `k` queries.
    pub proposals_per_query: usize,
    /// Upper bound on queries per sample; sizes the proposal table and the
    /// query positional table.
    pub max_queries: usize,
    /// Frames per video; inputs must arrive at exactly this length.
    pub frame_count: usize,
    /// Width of the raw frame and query feature vectors.
    pub d_in: usize,
    pub dropout: f64,
    /// Softmax temperature for the cosine correspondence head.
    pub corr_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            ffn_width: 256,
            proposals_per_query: 10,
            max_queries: 4,
            frame_count: 64,
            d_in: 32,
            dropout: 0.1,
            corr_temperature: 0.07,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::Config(format!(
                "d_model must be positive and even, got {}",
                self.d_model
            )));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.n_dec_layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if self.ffn_width == 0 {
            return Err(Error::Config("ffn_width must be positive".into()));
        }
        if self.proposals_per_query == 0 {
            return Err(Error::Config("proposals_per_query must be positive".into()));
        }
        if self.max_queries == 0 {
            return Err(Error::Config("max_queries must be positive".into()));
        }
        if self.frame_count == 0 {
            return Err(Error::Config("frame_count must be positive".into()));
        }
        if self.d_in == 0 {
            return Err(Error::Config("d_in must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.corr_temperature <= 0.0 {
            return Err(Error::Config(format!(
                "corr_temperature must be positive, got {}",
                self.corr_temperature
            )));
        }
        Ok(())
    }

    /// Total proposal slots in the table.
    pub fn n_proposal_slots(&self) -> usize {
        self.proposals_per_query * self.max_queries
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::default();
        c.n_heads = 3;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::default();
        c.d_model = 0;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::default();
        c.n_dec_layers = 0;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::default();
        c.dropout = 1.0;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::default();
        c.corr_temperature = 0.0;
        assert!(c.validate().is_err());

        // Zero encoder layers is a legal degenerate configuration.
        let mut c = ModelConfig::default();
        c.n_enc_layers = 0;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn serializes_round_trip() {
        let c = ModelConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(c, back);
    }
}
