//! Training and model configuration. Every field has a default, so a config
//! file only needs the keys it overrides.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_ff: 128,
            heads: 2,
            enc_layers: 4,
            dec_layers: 2,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Passes over the training split; fractional values stop mid-epoch.
    pub epochs: f64,
    /// Hard cap on optimizer steps, applied after `epochs`.
    pub max_steps: Option<u64>,
    pub warmup: u64,
    pub lr_factor: f64,
    pub grad_clip: f64,
    /// Train / dev / test fractions used to pick the training portion of a
    /// dataset file.
    pub split: [f64; 3],
    /// Number of parameter snapshots averaged into the final model.
    pub average_last: usize,
    /// Fraction of the run (at its end) over which snapshots are spread.
    pub average_window: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            batch_size: 32,
            epochs: 1.0,
            max_steps: None,
            warmup: 400,
            lr_factor: 1.0,
            grad_clip: 5.0,
            split: [0.9, 0.05, 0.05],
            average_last: 1,
            average_window: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskCtcConfig {
    pub p_thr: f64,
    pub iterations: usize,
    pub cmlm_weight: f64,
    /// Adds the intermediate CTC term of [`InterConfig`] to the encoder.
    pub intermediate: bool,
}

impl Default for MaskCtcConfig {
    fn default() -> Self {
        MaskCtcConfig {
            p_thr: 0.99,
            iterations: 10,
            cmlm_weight: 0.7,
            intermediate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImprovedConfig {
    pub span_mean: f64,
    pub length_classes: usize,
    pub iterations: usize,
    pub length_weight: f64,
}

impl Default for ImprovedConfig {
    fn default() -> Self {
        ImprovedConfig {
            span_mean: 2.0,
            length_classes: 50,
            iterations: 5,
            length_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignDenoiseConfig {
    pub sub_rate: f64,
    pub del_rate: f64,
    pub ins_rate: f64,
    /// Weight of the decoder CTC term next to the encoder CTC term.
    pub dec_weight: f64,
}

impl Default for AlignDenoiseConfig {
    fn default() -> Self {
        AlignDenoiseConfig {
            sub_rate: 0.15,
            del_rate: 0.05,
            ins_rate: 0.05,
            dec_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterConfig {
    /// 1-based encoder block indices whose outputs are tapped. Empty means
    /// the middle block.
    pub layers: Vec<usize>,
    pub weight: f64,
}

impl Default for InterConfig {
    fn default() -> Self {
        InterConfig {
            layers: Vec::new(),
            weight: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfCondConfig {
    pub enabled: bool,
}

impl Default for SelfCondConfig {
    fn default() -> Self {
        SelfCondConfig { enabled: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InsertionConfig {
    pub max_rounds: usize,
}

impl Default for InsertionConfig {
    fn default() -> Self {
        InsertionConfig { max_rounds: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KermitConfig {
    pub lambda: f64,
    /// Insertion rounds run before the final CTC pass; `None` runs until the
    /// insertion head stops (bounded by `insertion.max_rounds`).
    pub rounds_budget: Option<usize>,
}

impl Default for KermitConfig {
    fn default() -> Self {
        KermitConfig {
            lambda: 0.5,
            rounds_budget: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailHandling {
    Discard,
    EmitPartial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CifConfig {
    pub threshold: f64,
    pub tail_handling: TailHandling,
    pub w_cif: f64,
    pub w_ctc: f64,
    pub w_qua: f64,
}

impl Default for CifConfig {
    fn default() -> Self {
        CifConfig {
            threshold: 1.0,
            tail_handling: TailHandling::Discard,
            w_cif: 1.0,
            w_ctc: 0.5,
            w_qua: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArConfig {
    /// Weight of the auxiliary encoder CTC loss during training.
    pub ctc_weight: f64,
    /// Output cap; `None` caps at the number of input frames.
    pub max_len: Option<usize>,
}

impl Default for ArConfig {
    fn default() -> Self {
        ArConfig {
            ctc_weight: 0.3,
            max_len: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mask_ctc: MaskCtcConfig,
    pub improved: ImprovedConfig,
    pub align_denoise: AlignDenoiseConfig,
    pub inter: InterConfig,
    pub selfcond: SelfCondConfig,
    pub insertion: InsertionConfig,
    pub kermit: KermitConfig,
    pub cif: CifConfig,
    pub ar: ArConfig,
}

impl Config {
    /// Tap layers with the "middle block" default resolved.
    pub fn tap_layers(&self) -> Vec<usize> {
        if self.inter.layers.is_empty() {
            vec![(self.model.enc_layers / 2).max(1)]
        } else {
            self.inter.layers.clone()
        }
    }
}
