//! Run configuration: a TOML file with a fixed key set. Unknown keys and
//! sections are rejected.
//!
//! ```toml
//! seed = 0
//!
//! [model]
//! kind = "plo-vlm"            # or "plo-llm"
//! observation_order = "dynamic"
//! cues = 4
//!
//! [train]
//! epochs = 20
//!
//! [data]
//! path = "data"               # omit to generate the [synth] split in memory
//! cues = "cues.txt"           # required by plo-llm
//!
//! [eval]
//! world = "closed"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{Feasibility, World};
use crate::llm::{FusionWeights, LlmLossWeights};
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::tensor::AdamConfig;
use crate::vlm::{ObservationOrder, VlmLossWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "plo-vlm")]
    Vlm,
    #[serde(rename = "plo-llm")]
    Llm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Vlm => "plo-vlm",
            ModelKind::Llm => "plo-llm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub heads: usize,
    pub image_layers: usize,
    pub text_layers: usize,
    pub embed_dim: usize,
    pub max_text_len: usize,
    pub context_len: usize,
    /// Observation cues per composition.
    pub cues: usize,
    pub tau: f64,
    pub adapters: bool,
    pub ca_hidden_mult: usize,
    pub observation_order: ObservationOrder,
    pub fusion_soft: f64,
    pub fusion_hard: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        let e = &m.encoder;
        let f = FusionWeights::default();
        ModelSection {
            kind: ModelKind::Vlm,
            image_size: e.image_size,
            patch_size: e.patch,
            width: e.width,
            heads: e.heads,
            image_layers: e.image_layers,
            text_layers: e.text_layers,
            embed_dim: e.embed_dim,
            max_text_len: e.max_text_len,
            context_len: m.context_len,
            cues: 4,
            tau: m.tau,
            adapters: m.adapters,
            ca_hidden_mult: m.ca_hidden_mult,
            observation_order: ObservationOrder::Dynamic,
            fusion_soft: f.soft,
            fusion_hard: f.hard,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub obs: f64,
    pub state: f64,
    pub object: f64,
    pub comp: f64,
    pub step: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let v = VlmLossWeights::default();
        LossSection {
            obs: v.obs,
            state: v.state,
            object: v.object,
            comp: v.comp,
            step: LlmLossWeights::default().step,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        TrainSection {
            lr: a.lr,
            batch_size: 64,
            epochs: 20,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub cues: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub num_states: usize,
    pub num_objects: usize,
    pub num_val_unseen: usize,
    pub num_test_unseen: usize,
    pub train_per_pair: usize,
    pub eval_per_pair: usize,
    pub state_strength: f64,
    pub object_conditioning: f64,
    pub object_contrast: f64,
    pub noise: f64,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        SynthSection {
            num_states: s.num_states,
            num_objects: s.num_objects,
            num_val_unseen: s.num_val_unseen,
            num_test_unseen: s.num_test_unseen,
            train_per_pair: s.train_per_pair,
            eval_per_pair: s.eval_per_pair,
            state_strength: s.state_strength,
            object_conditioning: s.object_conditioning,
            object_contrast: s.object_contrast,
            noise: s.noise,
            seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeasibilityMode {
    Similarity,
    Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub world: WorldSetting,
    pub feasibility: FeasibilityMode,
    pub mask: Option<PathBuf>,
    /// Similarity threshold; calibrated on validation data when absent.
    pub threshold: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorldSetting {
    Closed,
    Open,
}

impl From<WorldSetting> for World {
    fn from(w: WorldSetting) -> World {
        match w {
            WorldSetting::Closed => World::Closed,
            WorldSetting::Open => World::Open,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            world: WorldSetting::Closed,
            feasibility: FeasibilityMode::Similarity,
            mask: None,
            threshold: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub synth: SynthSection,
    pub eval: EvalSection,
}


impl RunConfig {
    /// Parses and validates config text.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("{source}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        if !path.exists() {
            return Err(Error::Missing {
                what: "config file",
                path: path.to_path_buf(),
            });
        }
        let text = std::fs::read_to_string(path)?;
        Ok((Self::parse(&text, &path.display().to_string())?, text))
    }

    /// Canonical text for a config that did not come from a file.
    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.synth_config().validate()?;
        let m = &self.model;
        if m.cues == 0 {
            return Err(Error::Config("model.cues must be at least 1".into()));
        }
        FusionWeights::new(m.fusion_soft, m.fusion_hard)?;
        let l = &self.loss;
        for (k, v) in [("obs", l.obs), ("state", l.state), ("object", l.object), ("comp", l.comp), ("step", l.step)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss.{k} must be a non-negative number, got {v}")));
            }
        }
        let t = &self.train;
        if !(t.lr > 0.0) || !t.lr.is_finite() {
            return Err(Error::Config(format!("train.lr must be positive, got {}", t.lr)));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return Err(Error::Config("train.beta1/beta2 must lie in [0, 1) and train.eps must be positive".into()));
        }
        if self.eval.world == WorldSetting::Open && self.eval.feasibility == FeasibilityMode::Mask && self.eval.mask.is_none() {
            return Err(Error::Config("eval.feasibility = \"mask\" needs eval.mask".into()));
        }
        if let Some(th) = self.eval.threshold {
            if !th.is_finite() {
                return Err(Error::Config("eval.threshold must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let m = &self.model;
        EncoderConfig {
            image_size: m.image_size,
            channels: 3,
            patch: m.patch_size,
            width: m.width,
            heads: m.heads,
            image_layers: m.image_layers,
            text_layers: m.text_layers,
            embed_dim: m.embed_dim,
            max_text_len: m.max_text_len,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder_config(),
            context_len: self.model.context_len,
            tau: self.model.tau,
            adapters: self.model.adapters,
            ca_hidden_mult: self.model.ca_hidden_mult,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            num_states: s.num_states,
            num_objects: s.num_objects,
            image_size: self.model.image_size,
            patch_size: self.model.patch_size,
            num_val_unseen: s.num_val_unseen,
            num_test_unseen: s.num_test_unseen,
            train_per_pair: s.train_per_pair,
            eval_per_pair: s.eval_per_pair,
            state_strength: s.state_strength,
            object_conditioning: s.object_conditioning,
            object_contrast: s.object_contrast,
            noise: s.noise,
            seed: s.seed.unwrap_or(self.seed),
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.eps,
        }
    }

    pub fn vlm_weights(&self) -> VlmLossWeights {
        VlmLossWeights {
            obs: self.loss.obs,
            state: self.loss.state,
            object: self.loss.object,
            comp: self.loss.comp,
        }
    }

    pub fn llm_weights(&self) -> LlmLossWeights {
        LlmLossWeights {
            step: self.loss.step,
            comp: self.loss.comp,
        }
    }

    pub fn fusion(&self) -> FusionWeights {
        FusionWeights {
            soft: self.model.fusion_soft,
            hard: self.model.fusion_hard,
        }
    }

    /// Resolved feasibility mode for open-world evaluation.
    pub fn feasibility(&self) -> Option<Feasibility> {
        match self.eval.feasibility {
            FeasibilityMode::Mask => self.eval.mask.clone().map(Feasibility::MaskFile),
            FeasibilityMode::Similarity => self.eval.threshold.map(|threshold| Feasibility::Similarity { threshold }),
        }
    }
}
