use crate::error::{Error, Result};

/// Network dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    /// Units per direction; the body's top output is 2·hidden wide.
    pub hidden: usize,
    /// Mel bins (F).
    pub n_freq: usize,
    /// F, or 2F when deltas are appended.
    pub input_dim: usize,
    /// Embedding dimension (D).
    pub embed_dim: usize,
    /// Sources (C).
    pub n_sources: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 2×64 BLSTM, F = 32, D = 8, deltas on.
    pub fn desk() -> Self {
        Self { n_layers: 2, hidden: 64, n_freq: 32, input_dim: 64, embed_dim: 8, n_sources: 2, seed: 0 }
    }

    /// 4×500 BLSTM, F = 150, D = 20, deltas on.
    pub fn paper() -> Self {
        Self { n_layers: 4, hidden: 500, n_freq: 150, input_dim: 300, embed_dim: 20, n_sources: 2, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("hidden", self.hidden),
            ("n_freq", self.n_freq),
            ("input_dim", self.input_dim),
            ("embed_dim", self.embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.n_sources < 2 {
            return Err(Error::InvalidArgument("n_sources must be at least 2".into()));
        }
        Ok(())
    }

    pub fn top_width(&self) -> usize {
        2 * self.hidden
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}
