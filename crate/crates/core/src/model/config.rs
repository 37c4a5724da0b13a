use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the encoder–decoder transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: 2+2 layers, width 64, 4 heads.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            d_model: 64,
            num_heads: 4,
            d_ffn: 128,
            dropout: 0.1,
            vocab_size,
            max_len: 32,
            seed: 1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_encoder_layers", self.num_encoder_layers),
            ("num_decoder_layers", self.num_decoder_layers),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len must be at least 2"));
        }
        Ok(())
    }
}
