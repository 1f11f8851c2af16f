use crate::error::{Error, Result};

/// Encoder dimensions. Defaults are the desk-scale model used throughout
/// the test suite.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub layernorm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_blocks: 2,
            hidden_size: 32,
            num_heads: 2,
            intermediate_size: 128,
            vocab_size: 64,
            max_seq_len: 16,
            dropout_rate: 0.1,
            layernorm_eps: 1e-12,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("num_blocks", self.num_blocks),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("intermediate_size", self.intermediate_size),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.layernorm_eps.is_nan() || self.layernorm_eps < 0.0 {
            return Err(Error::Config("layernorm_eps must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Closed-form parameter count of the encoder (no task head).
    pub fn param_count(&self) -> usize {
        let (h, i, l) = (self.hidden_size, self.intermediate_size, self.num_blocks);
        let embed = self.vocab_size * h + self.max_seq_len * h + 2 * h;
        let block = 4 * (h * h + h) + (h * i + i) + (i * h + h) + 4 * h;
        let pool = h * h + h;
        embed + l * block + pool
    }
}
