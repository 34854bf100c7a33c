//! Three-encoder encoder-decoder response generator.
//!
//! Context, user causality and sys causality each get their own T5-style
//! encoder (pre-norm RMS layers, relative position buckets, shared token
//! embedding). The context and user encodings are mean-pooled and
//! concatenated for the emotion head. All present encodings are stacked
//! along the sequence axis and passed through a position-wise fusion layer;
//! the decoder cross-attends to that fused sequence. Training minimizes
//! emotion cross-entropy plus summed token negative log-likelihood.

mod graph;
mod loss;
mod optim;
mod params;
mod t5;
mod tensor;
mod train;
mod vocab;

pub use graph::{Gradients, Graph, Var};
pub use loss::{emotion_loss, gen_loss, softmax, GenLoss};
pub use optim::Adam;
pub use params::{normal, seeded, ParamStore};
pub use t5::{CausalityT5, EncodedBatch, EncodedItem, LossBreakdown, ModelInput, TrainExample};
pub use tensor::Tensor;
pub use train::{perplexity, train, EpochLog, StepLog, TeacherForced, TrainReport, UniformModel};
pub use vocab::{Vocab, BOS, EOS, PAD, UNK};

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Base,
    CausalityUser,
    CausalityUserSys,
}

impl ModelVariant {
    pub fn encoder_count(self) -> usize {
        match self {
            ModelVariant::Base => 1,
            ModelVariant::CausalityUser => 2,
            ModelVariant::CausalityUserSys => 3,
        }
    }

    pub fn uses_user(self) -> bool {
        self != ModelVariant::Base
    }

    pub fn uses_sys(self) -> bool {
        self == ModelVariant::CausalityUserSys
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Base => "base",
            ModelVariant::CausalityUser => "causality_user",
            ModelVariant::CausalityUserSys => "causality_user_sys",
        }
    }
}

impl core::str::FromStr for ModelVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(ModelVariant::Base),
            "causality_user" => Ok(ModelVariant::CausalityUser),
            "causality_user_sys" => Ok(ModelVariant::CausalityUserSys),
            other => Err(Error::Config(format!("unknown model variant {other:?}"))),
        }
    }
}

/// Which encoders receive gradient from the emotion loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmotionGrad {
    Joint,
    ContextOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub top_k: usize,
    /// Zero selects greedy argmax decoding.
    pub temperature: f64,
    pub max_generate_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            top_k: 20,
            temperature: 0.2,
            max_generate_len: 40,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_generate_len: usize) -> Self {
        Self {
            top_k: 1,
            temperature: 0.0,
            max_generate_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("decode.top_k must be at least 1".into()));
        }
        if self.max_generate_len == 0 {
            return Err(Error::Config("max_generate_len must be at least 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Config("temperature must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub rel_buckets: usize,
    pub rel_max_distance: usize,
    pub vocab_id: String,
    pub vocab_size: usize,
    pub emotion_count: usize,
    pub max_source_len: usize,
    pub decode: DecodeConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub emotion_loss_weight: f64,
    pub emotion_grad: EmotionGrad,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip: f64,
}

impl Default for ModelConfig {
    /// T5-small dimensions; Adam at 1e-5 with batch size 8.
    fn default() -> Self {
        Self {
            variant: ModelVariant::CausalityUserSys,
            hidden_dim: 512,
            encoder_layers: 6,
            decoder_layers: 6,
            num_heads: 8,
            ff_dim: 2048,
            rel_buckets: 32,
            rel_max_distance: 128,
            vocab_id: String::new(),
            vocab_size: 0,
            emotion_count: 32,
            max_source_len: 256,
            decode: DecodeConfig::default(),
            learning_rate: 1e-5,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            emotion_loss_weight: 1.0,
            emotion_grad: EmotionGrad::Joint,
            grad_clip: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("num_heads", self.num_heads),
            ("ff_dim", self.ff_dim),
            ("rel_buckets", self.rel_buckets),
            ("rel_max_distance", self.rel_max_distance),
            ("vocab_size", self.vocab_size),
            ("emotion_count", self.emotion_count),
            ("max_source_len", self.max_source_len),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config("hidden_dim must be divisible by num_heads".into()));
        }
        if self.rel_buckets < 4 {
            return Err(Error::Config("rel_buckets must be at least 4".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        self.decode.validate()
    }
}
