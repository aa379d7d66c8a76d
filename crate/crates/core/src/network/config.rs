use serde::{Deserialize, Serialize};

use crate::layers::Activation;

use super::ModelError;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsvcConfig {
    pub frames_per_seq: usize,
    pub feature_dim: usize,
    /// Width of the time-distributed dense layer.
    pub td_units: usize,
    #[serde(default = "default_td_activation")]
    pub td_activation: Activation,
    /// LSTM units per direction in each encoder layer.
    pub enc_units: usize,
    /// Encoder depth; also the number of stacked attention layers.
    pub enc_layers: usize,
    pub dec_units: usize,
    /// Hidden width of each additive attention scorer.
    pub attn_units: usize,
    /// Output width of the stacked-context projection.
    pub stack_units: usize,
    #[serde(default = "default_stack_activation")]
    pub stack_activation: Activation,
    /// 0 disables the spatial hard pull path.
    pub shp_units: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub max_caption_len: usize,
    #[serde(default = "default_true")]
    pub embeddings_trainable: bool,
}

fn default_td_activation() -> Activation {
    Activation::Tanh
}

fn default_stack_activation() -> Activation {
    Activation::Relu
}

fn default_true() -> bool {
    true
}

impl SsvcConfig {
    /// Full-size configuration: 15 frames of 4096-d features, 256 encoder
    /// units per direction over two layers, a 512-unit decoder, 45 SHP
    /// units and 100-d word vectors.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            frames_per_seq: 15,
            feature_dim: 4096,
            td_units: 128,
            td_activation: Activation::Tanh,
            enc_units: 256,
            enc_layers: 2,
            dec_units: 512,
            attn_units: 256,
            stack_units: 512,
            stack_activation: Activation::Relu,
            shp_units: 45,
            embed_dim: 100,
            vocab_size,
            max_caption_len: 20,
            embeddings_trainable: true,
        }
    }

    /// Desk-scale configuration used for the synthetic learnability runs.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            frames_per_seq: 6,
            feature_dim: 24,
            td_units: 16,
            td_activation: Activation::Tanh,
            enc_units: 16,
            enc_layers: 2,
            dec_units: 32,
            attn_units: 16,
            stack_units: 32,
            stack_activation: Activation::Relu,
            shp_units: 8,
            embed_dim: 16,
            vocab_size,
            max_caption_len: 8,
            embeddings_trainable: true,
        }
    }

    /// Miniature configuration for end-to-end gradient checks.
    pub fn mini() -> Self {
        Self {
            frames_per_seq: 4,
            feature_dim: 6,
            td_units: 5,
            td_activation: Activation::Tanh,
            enc_units: 3,
            enc_layers: 2,
            dec_units: 6,
            attn_units: 4,
            stack_units: 5,
            stack_activation: Activation::Relu,
            shp_units: 3,
            embed_dim: 4,
            vocab_size: 7,
            max_caption_len: 6,
            embeddings_trainable: true,
        }
    }

    pub fn decoder_input_dim(&self) -> usize {
        self.embed_dim + self.stack_units + self.shp_units
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("frames_per_seq", self.frames_per_seq),
            ("feature_dim", self.feature_dim),
            ("td_units", self.td_units),
            ("enc_units", self.enc_units),
            ("enc_layers", self.enc_layers),
            ("dec_units", self.dec_units),
            ("attn_units", self.attn_units),
            ("stack_units", self.stack_units),
            ("embed_dim", self.embed_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(ModelError::Config {
                    field,
                    reason: "must be positive".into(),
                });
            }
        }
        if self.dec_units != 2 * self.enc_units {
            return Err(ModelError::Config {
                field: "dec_units",
                reason: format!(
                    "must equal 2 * enc_units = {} (got {})",
                    2 * self.enc_units,
                    self.dec_units
                ),
            });
        }
        if self.vocab_size <= crate::data::vocab::NUM_RESERVED {
            return Err(ModelError::Config {
                field: "vocab_size",
                reason: format!(
                    "must exceed the {} reserved tokens",
                    crate::data::vocab::NUM_RESERVED
                ),
            });
        }
        if self.max_caption_len < 3 {
            return Err(ModelError::Config {
                field: "max_caption_len",
                reason: "must leave room for start, one word and end".into(),
            });
        }
        if self.stack_activation == Activation::None {
            return Err(ModelError::Config {
                field: "stack_activation",
                reason: "must be relu or tanh".into(),
            });
        }
        Ok(())
    }

    /// First field (by name) whose value differs from `other`, as
    /// `(field, self value, other value)`.
    pub fn first_difference(&self, other: &Self) -> Option<(String, String, String)> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let (a, b) = (a.as_object()?, b.as_object()?);
        a.iter().find_map(|(k, va)| {
            let vb = &b[k];
            (va != vb).then(|| (k.clone(), va.to_string(), vb.to_string()))
        })
    }
}
