//! One declarative TOML file drives every run. The schema mirrors the
//! module configs but keeps enum-valued fields as strings so a config is
//! plain text end to end; `validate` cross-checks fields that must agree
//! across sections before any work starts.

use crate::encoders::{
    Activation, Pooling, PositionalEncoding, SpatialEncoderConfig, SpatialKind,
    TemporalEncoderConfig, TextEncoderConfig,
};
use crate::error::{Error, Result};
use crate::inference::{TieRule, VoteConfig};
use crate::keypoint_features::{MissingLagPolicy, OffsetConfig};
use crate::model::{StageTag, TrimodalConfig};
use crate::seeding::derive_seed;
use crate::synthgen::{GroupBias, SynthConfig};
use crate::training::{FocalLossParams, SamplingSettings, StageConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Single knob for all stochastic sites; stages hash their own streams
    /// out of it.
    pub seed: u64,
    /// Worker threads for per-sample feature preparation; 0 keeps the
    /// library default.
    pub workers: usize,
    pub paths: PathsSection,
    pub offsets: OffsetsSection,
    pub model: ModelSection,
    pub sampling: SamplingSection,
    pub loss: LossSection,
    pub pretrain: TrainSection,
    pub finetune: TrainSection,
    pub vote: VoteSection,
    pub synth: SynthSection,
    pub weaksup: WeaksupSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Directory holding the dataset manifest and feature files.
    pub data_dir: PathBuf,
    /// Where reports, checkpoints, and echoes land.
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OffsetsSection {
    /// Lag distances in frames; empty means raw coordinates only.
    pub lags: Vec<usize>,
}

impl Default for OffsetsSection {
    fn default() -> Self {
        OffsetsSection {
            lags: vec![8, 16, 24],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub visual_width: usize,
    pub branch_dim: usize,
    /// relu | tanh | linear
    pub fusion_activation: String,
    pub spatial: SpatialSection,
    pub keypoint_temporal: TemporalSection,
    pub visual_temporal: TemporalSection,
    pub text: TextSection,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            visual_width: 768,
            branch_dim: 64,
            fusion_activation: "relu".to_string(),
            spatial: SpatialSection::default(),
            keypoint_temporal: TemporalSection {
                model_dim: 64,
                layer_count: 2,
                head_count: 4,
                feedforward_dim: 128,
                max_sequence_length: 4096,
                dropout_rate: 0.0,
            },
            visual_temporal: TemporalSection {
                model_dim: 64,
                layer_count: 2,
                head_count: 4,
                feedforward_dim: 128,
                max_sequence_length: 1024,
                dropout_rate: 0.0,
            },
            text: TextSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpatialSection {
    /// mlp | gcn | gat | gin
    pub kind: String,
    pub hidden_dim: usize,
    pub layer_count: usize,
    pub frame_embedding_dim: usize,
    /// relu | tanh | linear
    pub activation: String,
    pub attention_heads: usize,
    pub epsilon_learnable: bool,
}

impl Default for SpatialSection {
    fn default() -> Self {
        SpatialSection {
            kind: "gcn".to_string(),
            hidden_dim: 64,
            layer_count: 2,
            frame_embedding_dim: 64,
            activation: "relu".to_string(),
            attention_heads: 4,
            epsilon_learnable: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalSection {
    pub model_dim: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub feedforward_dim: usize,
    pub max_sequence_length: usize,
    pub dropout_rate: f64,
}

impl Default for TemporalSection {
    fn default() -> Self {
        TemporalSection {
            model_dim: 64,
            layer_count: 2,
            head_count: 4,
            feedforward_dim: 128,
            max_sequence_length: 4096,
            dropout_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextSection {
    pub vocabulary_size: usize,
    pub token_embedding_dim: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub max_tokens: usize,
    pub dropout_rate: f64,
}

impl Default for TextSection {
    fn default() -> Self {
        TextSection {
            vocabulary_size: 64,
            token_embedding_dim: 32,
            layer_count: 1,
            head_count: 2,
            max_tokens: 64,
            dropout_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub keypoint_frames: usize,
    pub keypoint_min_gap: usize,
    pub visual_frames: usize,
    pub visual_min_gap: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        let s = SamplingSettings::default();
        SamplingSection {
            keypoint_frames: s.keypoint_frames,
            keypoint_min_gap: s.keypoint_min_gap,
            visual_frames: s.visual_frames,
            visual_min_gap: s.visual_min_gap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub gamma: f64,
    /// Per-class weight, win then loss.
    pub alpha: [f64; 2],
}

impl Default for LossSection {
    fn default() -> Self {
        let p = FocalLossParams::default();
        LossSection {
            gamma: p.gamma,
            alpha: p.alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate in the fine-tune stage.
    pub finetune_lr_scale: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub resample_views_per_epoch: usize,
    pub val_fraction: f64,
    pub pseudo_weight: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let s = StageConfig::new(StageTag::FinetuneFull, 0);
        TrainSection {
            learning_rate: s.learning_rate,
            finetune_lr_scale: s.finetune_lr_scale,
            weight_decay: s.weight_decay,
            epochs: s.epochs,
            batch_size: s.batch_size,
            resample_views_per_epoch: s.resample_views_per_epoch,
            val_fraction: s.val_fraction,
            pseudo_weight: s.pseudo_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoteSection {
    pub views: usize,
}

impl Default for VoteSection {
    fn default() -> Self {
        VoteSection {
            views: VoteConfig::default().views,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub sample_count: usize,
    pub class_prior: f64,
    pub frames_min: usize,
    pub frames_max: usize,
    pub event_count: usize,
    pub event_duration_frames: usize,
    pub event_magnitude: f64,
    /// face | hands | skeleton
    pub win_group: String,
    pub loss_group: String,
    pub visual_magnitude: f64,
    pub vocab_size: usize,
    pub text_length: usize,
    pub text_separation: f64,
    pub noise_floor: f64,
    pub id_prefix: String,
}

impl Default for SynthSection {
    fn default() -> Self {
        let c = SynthConfig::default();
        SynthSection {
            sample_count: c.sample_count,
            class_prior: c.class_prior,
            frames_min: c.frames_min,
            frames_max: c.frames_max,
            event_count: c.event_count,
            event_duration_frames: c.event_duration_frames,
            event_magnitude: c.event_magnitude,
            win_group: c.event_group_bias.win.name().to_string(),
            loss_group: c.event_group_bias.loss.name().to_string(),
            visual_magnitude: c.visual_magnitude,
            vocab_size: c.vocab_size,
            text_length: c.text_length,
            text_separation: c.text_separation,
            noise_floor: c.noise_floor,
            id_prefix: c.id_prefix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeaksupSection {
    /// Simulated pseudo-label flip rate for ablations.
    pub noise_rate: f64,
    /// Confidence margins at or below this are excluded from training.
    pub margin_threshold: f64,
}

impl Default for WeaksupSection {
    fn default() -> Self {
        WeaksupSection {
            noise_rate: 0.356,
            margin_threshold: 0.0,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            workers: 0,
            paths: PathsSection::default(),
            offsets: OffsetsSection::default(),
            model: ModelSection::default(),
            sampling: SamplingSection::default(),
            loss: LossSection::default(),
            pretrain: TrainSection::default(),
            finetune: TrainSection::default(),
            vote: VoteSection::default(),
            synth: SynthSection::default(),
            weaksup: WeaksupSection::default(),
        }
    }
}

fn parse_group(s: &str) -> Result<crate::graph_topology::Group> {
    crate::graph_topology::Group::ALL
        .into_iter()
        .find(|g| g.name() == s)
        .ok_or_else(|| Error::parse(format!("unknown keypoint group '{s}'")))
}

impl RunConfig {
    pub fn offset_config(&self) -> OffsetConfig {
        OffsetConfig {
            lags: self.offsets.lags.clone(),
            missing_lag_policy: MissingLagPolicy::ZeroFill,
        }
    }

    pub fn model_config(&self) -> Result<TrimodalConfig> {
        let m = &self.model;
        let sp = &m.spatial;
        Ok(TrimodalConfig {
            spatial: SpatialEncoderConfig {
                kind: SpatialKind::parse(&sp.kind)?,
                node_feature_dim: self.offset_config().feature_width(),
                hidden_dim: sp.hidden_dim,
                layer_count: sp.layer_count,
                frame_embedding_dim: sp.frame_embedding_dim,
                activation: Activation::parse(&sp.activation)?,
                attention_heads: sp.attention_heads,
                epsilon_learnable: sp.epsilon_learnable,
            },
            keypoint_temporal: temporal_config(&m.keypoint_temporal),
            visual_temporal: temporal_config(&m.visual_temporal),
            text: TextEncoderConfig {
                vocabulary_size: m.text.vocabulary_size,
                token_embedding_dim: m.text.token_embedding_dim,
                layer_count: m.text.layer_count,
                head_count: m.text.head_count,
                max_tokens: m.text.max_tokens,
                pooling: Pooling::Mean,
                dropout_rate: m.text.dropout_rate,
            },
            visual_width: m.visual_width,
            branch_dim: m.branch_dim,
            fusion_activation: Activation::parse(&m.fusion_activation)?,
        })
    }

    pub fn sampling_settings(&self) -> SamplingSettings {
        SamplingSettings {
            keypoint_frames: self.sampling.keypoint_frames,
            keypoint_min_gap: self.sampling.keypoint_min_gap,
            visual_frames: self.sampling.visual_frames,
            visual_min_gap: self.sampling.visual_min_gap,
        }
    }

    pub fn loss_params(&self) -> FocalLossParams {
        FocalLossParams {
            gamma: self.loss.gamma,
            alpha: self.loss.alpha,
        }
    }

    /// Stage configuration for one training stage; branch stages read the
    /// `[pretrain]` section, the full-model stage reads `[finetune]`.
    pub fn stage_config(&self, stage: StageTag) -> StageConfig {
        let section = match stage {
            StageTag::FinetuneFull => &self.finetune,
            _ => &self.pretrain,
        };
        let mut cfg = StageConfig::new(stage, self.seed);
        cfg.learning_rate = section.learning_rate;
        cfg.finetune_lr_scale = section.finetune_lr_scale;
        cfg.weight_decay = section.weight_decay;
        cfg.epochs = section.epochs;
        cfg.batch_size = section.batch_size;
        cfg.resample_views_per_epoch = section.resample_views_per_epoch;
        cfg.val_fraction = section.val_fraction;
        cfg.pseudo_weight = section.pseudo_weight;
        cfg
    }

    pub fn vote_config(&self) -> VoteConfig {
        VoteConfig {
            views: self.vote.views,
            tie_rule: TieRule::MeanProbability,
            base_seed: derive_seed(self.seed, "vote", &[]),
        }
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let s = &self.synth;
        Ok(SynthConfig {
            sample_count: s.sample_count,
            class_prior: s.class_prior,
            frames_min: s.frames_min,
            frames_max: s.frames_max,
            event_count: s.event_count,
            event_duration_frames: s.event_duration_frames,
            event_magnitude: s.event_magnitude,
            event_group_bias: GroupBias {
                win: parse_group(&s.win_group)?,
                loss: parse_group(&s.loss_group)?,
            },
            visual_width: s.visual_width(self),
            visual_magnitude: s.visual_magnitude,
            vocab_size: s.vocab_size,
            text_length: s.text_length,
            text_separation: s.text_separation,
            noise_floor: s.noise_floor,
            id_prefix: s.id_prefix.clone(),
            seed: derive_seed(self.seed, "synth", &[]),
        })
    }

    /// Check every section and the constraints that span sections.
    pub fn validate(&self) -> Result<()> {
        let offsets = self.offset_config();
        offsets.validate()?;
        let model = self.model_config()?;
        model.validate()?;
        self.loss_params().validate()?;
        for stage in [StageTag::PretrainKeypoint, StageTag::FinetuneFull] {
            self.stage_config(stage).validate()?;
        }
        self.vote_config().validate()?;
        self.synth_config()?.validate()?;
        if !(0.0..=1.0).contains(&self.weaksup.noise_rate) {
            return Err(Error::validation(format!(
                "weaksup.noise_rate must lie in [0, 1], got {}",
                self.weaksup.noise_rate
            )));
        }
        if self.weaksup.margin_threshold < 0.0 {
            return Err(Error::validation(
                "weaksup.margin_threshold must be non-negative".to_string(),
            ));
        }
        if model.keypoint_temporal.max_sequence_length < self.sampling.keypoint_frames {
            return Err(Error::validation(format!(
                "keypoint_temporal.max_sequence_length {} is below sampling.keypoint_frames {}",
                model.keypoint_temporal.max_sequence_length, self.sampling.keypoint_frames
            )));
        }
        if model.visual_temporal.max_sequence_length < self.sampling.visual_frames {
            return Err(Error::validation(format!(
                "visual_temporal.max_sequence_length {} is below sampling.visual_frames {}",
                model.visual_temporal.max_sequence_length, self.sampling.visual_frames
            )));
        }
        if self.synth.vocab_size > model.text.vocabulary_size {
            return Err(Error::validation(format!(
                "synth.vocab_size {} exceeds the text encoder vocabulary {}",
                self.synth.vocab_size, model.text.vocabulary_size
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::parse(format!("config serialization failed: {e}")))
    }
}

impl SynthSection {
    /// The generator always emits the width the model consumes.
    fn visual_width(&self, run: &RunConfig) -> usize {
        run.model.visual_width
    }
}

fn temporal_config(s: &TemporalSection) -> TemporalEncoderConfig {
    TemporalEncoderConfig {
        model_dim: s.model_dim,
        layer_count: s.layer_count,
        head_count: s.head_count,
        feedforward_dim: s.feedforward_dim,
        max_sequence_length: s.max_sequence_length,
        positional_encoding: PositionalEncoding::Sinusoidal,
        dropout_rate: s.dropout_rate,
    }
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig =
        toml::from_str(text).map_err(|e| Error::parse(format!("config parse error: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_run_config(&text)
}
