//! Model variants and hyperparameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MdamError, Result};

/// The full model and its five ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "MDAM")]
    Mdam,
    MulFusion,
    FrameOnly,
    CaptOnly,
    EarlyFusion,
    NoSelfAttn,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Mdam,
        Variant::MulFusion,
        Variant::FrameOnly,
        Variant::CaptOnly,
        Variant::EarlyFusion,
        Variant::NoSelfAttn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mdam => "MDAM",
            Variant::MulFusion => "MulFusion",
            Variant::FrameOnly => "FrameOnly",
            Variant::CaptOnly => "CaptOnly",
            Variant::EarlyFusion => "EarlyFusion",
            Variant::NoSelfAttn => "NoSelfAttn",
        }
    }

    pub fn uses_frames(self) -> bool {
        self != Variant::CaptOnly
    }

    pub fn uses_captions(self) -> bool {
        self != Variant::FrameOnly
    }

    pub fn uses_self_attention(self) -> bool {
        self != Variant::NoSelfAttn
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = MdamError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        let key = key.strip_prefix("mdam").unwrap_or(&key);
        let v = match key {
            "" => Variant::Mdam,
            "mulfusion" => Variant::MulFusion,
            "frameonly" => Variant::FrameOnly,
            "captonly" => Variant::CaptOnly,
            "earlyfusion" => Variant::EarlyFusion,
            "noselfattn" => Variant::NoSelfAttn,
            _ => return Err(MdamError::Config(format!("unknown variant {s:?}"))),
        };
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DropoutRates {
    pub attention: f64,
    pub ffn: f64,
    pub classifier: f64,
}

impl Default for DropoutRates {
    fn default() -> Self {
        DropoutRates {
            attention: 0.1,
            ffn: 0.1,
            classifier: 0.3,
        }
    }
}

impl DropoutRates {
    pub fn none() -> Self {
        DropoutRates {
            attention: 0.0,
            ffn: 0.0,
            classifier: 0.0,
        }
    }
}

/// Factor applied to both learning rates by [`VariantSpec::synthetic`].
pub const SYNTHETIC_LR_SCALE: f64 = 0.03;

/// Everything needed to build, train and checkpoint one model. Missing
/// fields in a JSON spec take the defaults below, which follow the
/// MovieQA configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariantSpec {
    pub variant: Variant,
    /// Story positions per clip (N).
    pub story_len: usize,
    /// Words per sentence (M).
    pub sentence_len: usize,
    pub d_model: usize,
    /// Frame feature width.
    pub d_v: usize,
    /// Word embedding width.
    pub d_word: usize,
    pub heads: usize,
    pub d_proj: usize,
    /// Layers per attention stack (L_attn).
    pub attn_layers: usize,
    /// Depth of each residual fusion block (L_m).
    pub fusion_depth: usize,
    /// Convolution window widths; `d_model` is split evenly between them.
    pub windows: Vec<usize>,
    pub dropout: DropoutRates,
    pub batch_size: usize,
    pub epochs: usize,
    pub phase1_lr: f64,
    pub phase2_lr: f64,
    /// Epochs without validation improvement before phase 1 ends early.
    pub phase1_patience: usize,
    /// Run the hinge-loss phase after cross-entropy pre-training.
    pub phase2: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub freeze_embeddings: bool,
    /// One positional table for captions, question and answers.
    pub shared_positional: bool,
    pub fusion_bias: bool,
    pub seed: u64,
}

impl Default for VariantSpec {
    fn default() -> Self {
        VariantSpec {
            variant: Variant::Mdam,
            story_len: 40,
            sentence_len: 60,
            d_model: 512,
            d_v: 2048,
            d_word: 300,
            heads: 8,
            d_proj: 64,
            attn_layers: 2,
            fusion_depth: 1,
            windows: vec![1, 2, 3, 4],
            dropout: DropoutRates::default(),
            batch_size: 16,
            epochs: 160,
            phase1_lr: 0.01,
            phase2_lr: 0.0001,
            phase1_patience: 20,
            phase2: true,
            clip_norm: Some(5.0),
            freeze_embeddings: true,
            shared_positional: true,
            fusion_bias: false,
            seed: 0,
        }
    }
}

impl VariantSpec {
    /// The MovieQA configuration (N=40, M=60).
    pub fn movieqa() -> Self {
        VariantSpec::default()
    }

    /// The PororoQA configuration (N=20, M=100).
    pub fn pororoqa() -> Self {
        VariantSpec {
            story_len: 20,
            sentence_len: 100,
            ..VariantSpec::default()
        }
    }

    /// Small widths used for gradient checks and quick tests.
    pub fn desk() -> Self {
        VariantSpec {
            story_len: 6,
            sentence_len: 8,
            d_model: 32,
            d_v: 32,
            d_word: 16,
            heads: 4,
            d_proj: 8,
            attn_layers: 2,
            fusion_depth: 2,
            ..VariantSpec::default()
        }
    }

    /// A model sized for a synthetic world: stories and sentences fit its
    /// limits and frames have its width. The learning rates are the
    /// defaults scaled by 0.03; at 0.01 the attention stacks stop learning
    /// on these widths.
    pub fn synthetic(world: &crate::data::synthetic::SyntheticWorldSpec) -> Self {
        VariantSpec {
            story_len: world.max_story,
            sentence_len: 12,
            d_model: 32,
            d_v: world.d_v,
            d_word: 32,
            heads: 4,
            d_proj: 8,
            attn_layers: 1,
            fusion_depth: 1,
            dropout: DropoutRates::none(),
            epochs: 30,
            phase1_lr: 0.01 * SYNTHETIC_LR_SCALE,
            phase2_lr: 0.0001 * SYNTHETIC_LR_SCALE,
            phase1_patience: 8,
            batch_size: 4,
            freeze_embeddings: false,
            seed: 1,
            ..VariantSpec::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Filters per convolution window width.
    pub fn filters_per_window(&self) -> usize {
        self.d_model / self.windows.len().max(1)
    }

    /// Width of one word feature row: embedding plus five casing flags.
    pub fn word_feature_dim(&self) -> usize {
        self.d_word + crate::text::CASING_FLAGS
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MdamError::Config(m));
        if self.windows.is_empty() || self.windows.contains(&0) {
            return fail(format!("invalid window widths {:?}", self.windows));
        }
        if self.d_model < 2 || self.d_model % self.windows.len() != 0 {
            return fail(format!(
                "d_model {} must be at least 2 and divisible by the {} window widths",
                self.d_model,
                self.windows.len()
            ));
        }
        if self.d_v < 2 {
            return fail(format!("d_v {} must be at least 2", self.d_v));
        }
        for (name, v) in [
            ("story_len", self.story_len),
            ("sentence_len", self.sentence_len),
            ("d_word", self.d_word),
            ("heads", self.heads),
            ("d_proj", self.d_proj),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.attn_layers == 0 {
            return fail("attn_layers (L_attn) must be at least 1".into());
        }
        if self.fusion_depth == 0 {
            return fail("fusion_depth (L_m) must be at least 1".into());
        }
        for (name, r) in [
            ("attention", self.dropout.attention),
            ("ffn", self.dropout.ffn),
            ("classifier", self.dropout.classifier),
        ] {
            if !(0.0..1.0).contains(&r) {
                return fail(format!("{name} dropout rate {r} outside [0, 1)"));
            }
        }
        Ok(())
    }
}
