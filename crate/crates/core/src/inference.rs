//! Prediction by majority vote over resampled views, evaluation metrics,
//! and the ablation harness comparing encoder kinds, offset features, and
//! training strategies across seeds.

use crate::datamodel::{DatasetManifest, Label};
use crate::encoders::SpatialKind;
use crate::error::{Error, Result};
use crate::graph_topology::Topology;
use crate::keypoint_features::OffsetConfig;
use crate::model::{StageTag, TrimodalConfig, TrimodalModel};
use crate::seeding::derive_sample_seed;
use crate::training::{
    finetune_full, load_dataset, pretrain_branch, train_full_from_scratch, FeaturePipeline,
    FocalLossParams, LoadedSample, SamplingSettings, StageConfig,
};
use crate::weaksup::{merge_datasets, simulate_pseudo_labels};
use rayon::prelude::*;
use serde::Serialize;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieRule {
    /// Break exact vote ties by the mean win probability (win at ≥ 0.5).
    MeanProbability,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteConfig {
    pub views: usize,
    pub tie_rule: TieRule,
    pub base_seed: u64,
}

impl Default for VoteConfig {
    fn default() -> Self {
        VoteConfig {
            views: 5,
            tie_rule: TieRule::MeanProbability,
            base_seed: 0,
        }
    }
}

impl VoteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::validation("views must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// Outcome of one voted prediction, with enough detail to audit the vote.
#[derive(Debug, Clone, PartialEq)]
pub struct VotedPrediction {
    pub label: Label,
    pub mean_win_probability: f64,
    pub votes_win: usize,
    pub votes_loss: usize,
    /// True only when the vote was exactly tied and the tie rule decided.
    pub tie_rule_used: bool,
}

/// Stable two-class softmax probability of the win class.
pub fn win_probability(logits: [f64; 2]) -> f64 {
    let m = logits[0].max(logits[1]);
    let e_win = (logits[0] - m).exp();
    let e_loss = (logits[1] - m).exp();
    e_win / (e_win + e_loss)
}

/// Combine per-view win probabilities into the final label: majority over
/// per-view argmax, exact tie broken by mean win probability.
pub fn vote_from_probabilities(win_probs: &[f64]) -> Result<VotedPrediction> {
    if win_probs.is_empty() {
        return Err(Error::validation("cannot vote over zero views".to_string()));
    }
    let votes_win = win_probs.iter().filter(|&&p| p >= 0.5).count();
    let votes_loss = win_probs.len() - votes_win;
    let mean = win_probs.iter().sum::<f64>() / win_probs.len() as f64;
    let (label, tie_rule_used) = match votes_win.cmp(&votes_loss) {
        std::cmp::Ordering::Greater => (Label::Win, false),
        std::cmp::Ordering::Less => (Label::Loss, false),
        std::cmp::Ordering::Equal => (
            if mean >= 0.5 { Label::Win } else { Label::Loss },
            true,
        ),
    };
    Ok(VotedPrediction {
        label,
        mean_win_probability: mean,
        votes_win,
        votes_loss,
        tie_rule_used,
    })
}

/// Predict one sample by voting over `views` independently resampled
/// feature views. Both the keypoint and the visual streams are redrawn
/// per view; the text tokens are deterministic.
pub fn predict_voted(
    model: &TrimodalModel,
    sample: &LoadedSample,
    pipeline: &FeaturePipeline,
    cfg: &VoteConfig,
) -> Result<VotedPrediction> {
    cfg.validate()?;
    let inputs: Vec<_> = (0..cfg.views)
        .into_par_iter()
        .map(|view| {
            let seed =
                derive_sample_seed(cfg.base_seed, "vote_view", &sample.sample_id, &[view as u64]);
            pipeline.view_inputs(sample, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut probs = Vec::with_capacity(cfg.views);
    for input in &inputs {
        probs.push(win_probability(model.logits(input)?));
    }
    vote_from_probabilities(&probs)
}

/// Confusion-matrix derived metrics. Indices follow `Label::index()`:
/// 0 = win, 1 = loss; `confusion[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: [f64; 2],
    pub recall: [f64; 2],
    pub confusion: [[usize; 2]; 2],
    pub sample_count: usize,
}

impl Metrics {
    pub fn from_confusion(confusion: [[usize; 2]; 2]) -> Result<Metrics> {
        let count: usize = confusion.iter().flatten().sum();
        if count == 0 {
            return Err(Error::validation("cannot compute metrics over zero samples".to_string()));
        }
        let trace = confusion[0][0] + confusion[1][1];
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = [
            ratio(confusion[0][0], confusion[0][0] + confusion[1][0]),
            ratio(confusion[1][1], confusion[0][1] + confusion[1][1]),
        ];
        let recall = [
            ratio(confusion[0][0], confusion[0][0] + confusion[0][1]),
            ratio(confusion[1][1], confusion[1][0] + confusion[1][1]),
        ];
        Ok(Metrics {
            accuracy: trace as f64 / count as f64,
            precision,
            recall,
            confusion,
            sample_count: count,
        })
    }

    pub fn render(&self) -> String {
        format!(
            "samples: {}\naccuracy: {:.4}\nconfusion (rows=truth win/loss, cols=pred):\n  {:>4} {:>4}\n  {:>4} {:>4}\nprecision win/loss: {:.4} / {:.4}\nrecall win/loss:    {:.4} / {:.4}\n",
            self.sample_count,
            self.accuracy,
            self.confusion[0][0],
            self.confusion[0][1],
            self.confusion[1][0],
            self.confusion[1][1],
            self.precision[0],
            self.precision[1],
            self.recall[0],
            self.recall[1],
        )
    }
}

/// One audited prediction row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordPrediction {
    pub sample_id: String,
    pub label: Label,
    pub prediction: Label,
    pub mean_win_probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub records: Vec<RecordPrediction>,
}

pub fn metrics_from_records(records: &[RecordPrediction]) -> Result<Metrics> {
    let mut confusion = [[0usize; 2]; 2];
    for r in records {
        confusion[r.label.index()][r.prediction.index()] += 1;
    }
    Metrics::from_confusion(confusion)
}

/// Evaluate voted predictions over a fully labeled sample set.
pub fn evaluate(
    model: &TrimodalModel,
    samples: &[LoadedSample],
    pipeline: &FeaturePipeline,
    vote_cfg: &VoteConfig,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::validation("cannot evaluate an empty dataset".to_string()));
    }
    let mut records = Vec::with_capacity(samples.len());
    for sample in samples {
        let label = sample.label.ok_or_else(|| {
            Error::validation(format!("sample '{}' is unlabeled", sample.sample_id))
        })?;
        let voted = predict_voted(model, sample, pipeline, vote_cfg)?;
        records.push(RecordPrediction {
            sample_id: sample.sample_id.clone(),
            label,
            prediction: voted.label,
            mean_win_probability: voted.mean_win_probability,
        });
    }
    let metrics = metrics_from_records(&records)?;
    Ok(Evaluation { metrics, records })
}

/// CSV emission of per-record predictions for audit.
pub fn predictions_csv(records: &[RecordPrediction]) -> String {
    let mut out = String::from("sample_id,label,prediction,mean_win_probability\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.sample_id, r.label, r.prediction, r.mean_win_probability
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Strategy {
    /// Full model from scratch on gold labels only.
    Direct,
    /// From scratch on gold plus simulated pseudo labels.
    WeakSup,
    /// Weak supervision with lag-offset features forced on.
    WeakSupOffsets,
    /// Branch pretraining, then weakly supervised fine-tuning.
    PretrainWeakSup,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Direct,
        Strategy::WeakSup,
        Strategy::WeakSupOffsets,
        Strategy::PretrainWeakSup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Direct => "direct",
            Strategy::WeakSup => "weak_sup",
            Strategy::WeakSupOffsets => "weak_sup+offsets",
            Strategy::PretrainWeakSup => "pretrain+weak_sup",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::parse(format!("unknown strategy '{s}'")))
    }

    fn uses_pseudo(self) -> bool {
        !matches!(self, Strategy::Direct)
    }
}

/// The configurations an ablation sweeps: the cartesian product of
/// encoder kinds, the offsets toggle, and training strategies.
#[derive(Debug, Clone)]
pub struct AblationGrid {
    pub encoders: Vec<SpatialKind>,
    pub offsets_on: Vec<bool>,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.encoders.is_empty()
            || self.offsets_on.is_empty()
            || self.strategies.is_empty()
            || self.seeds.is_empty()
        {
            return Err(Error::validation("ablation grid axes must be non-empty".to_string()));
        }
        Ok(())
    }
}

/// Knobs shared by every ablation row: a template model config (spatial
/// kind and feature width are overridden per row), desk-scale training
/// lengths, the pseudo-label noise rate, and a wall-clock budget.
#[derive(Debug, Clone)]
pub struct AblationSettings {
    pub config: TrimodalConfig,
    pub sampling: SamplingSettings,
    pub offsets: OffsetConfig,
    pub loss: FocalLossParams,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub val_fraction: f64,
    pub noise_rate: f64,
    pub vote: VoteConfig,
    pub budget_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub encoder: String,
    pub offsets: bool,
    pub strategy: String,
    pub per_seed_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub spread: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Set when the wall-clock budget ran out before the grid finished.
    pub incomplete: bool,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("encoder,offsets,strategy,mean_accuracy,spread,per_seed\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.per_seed_accuracy.iter().map(|a| format!("{a:.4}")).collect();
            out.push_str(&format!(
                "{},{},{},{:.4},{:.4},{}\n",
                r.encoder,
                if r.offsets { "on" } else { "off" },
                r.strategy,
                r.mean_accuracy,
                r.spread,
                seeds.join(";")
            ));
        }
        if self.incomplete {
            out.push_str("# INCOMPLETE: budget exhausted before all rows ran\n");
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = String::from(
            "encoder  offsets  strategy            mean_acc  spread\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<7}  {:<7}  {:<18}  {:>8.4}  {:>6.4}\n",
                r.encoder,
                if r.offsets { "on" } else { "off" },
                r.strategy,
                r.mean_accuracy,
                r.spread
            ));
        }
        if self.incomplete {
            out.push_str("table is INCOMPLETE: budget exhausted\n");
        }
        out
    }
}

fn mean_and_spread(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Model config specialized to one ablation row.
fn row_config(base: &TrimodalConfig, kind: SpatialKind, offsets: &OffsetConfig) -> TrimodalConfig {
    let mut cfg = base.clone();
    cfg.spatial.kind = kind;
    cfg.spatial.node_feature_dim = offsets.feature_width();
    cfg
}

fn row_pipeline(cfg: &TrimodalConfig, settings: &AblationSettings, offsets: OffsetConfig) -> FeaturePipeline {
    let mut pipeline = FeaturePipeline::from_config(cfg, settings.sampling.clone());
    pipeline.offsets = offsets;
    pipeline
}

#[allow(clippy::too_many_arguments)]
fn run_one_configuration(
    kind: SpatialKind,
    offsets_on: bool,
    strategy: Strategy,
    seed: u64,
    gold: &DatasetManifest,
    pool: &DatasetManifest,
    eval_samples_cache: &mut Option<Vec<LoadedSample>>,
    eval_manifest: &DatasetManifest,
    topology: &Topology,
    settings: &AblationSettings,
) -> Result<f64> {
    let effective_offsets = if offsets_on || strategy == Strategy::WeakSupOffsets {
        settings.offsets.clone()
    } else {
        OffsetConfig::raw_coordinates()
    };
    let cfg = row_config(&settings.config, kind, &effective_offsets);
    let pipeline = row_pipeline(&cfg, settings, effective_offsets);

    let dataset = if strategy.uses_pseudo() {
        let truth: Vec<(String, Label)> = pool
            .labeled()
            .map(|(r, l)| (r.sample_id.clone(), l))
            .collect();
        if truth.len() != pool.records.len() {
            return Err(Error::validation(
                "pseudo-label pool must carry ground truth for simulation".to_string(),
            ));
        }
        let pseudo = simulate_pseudo_labels(&truth, settings.noise_rate, seed)?;
        let unlabeled_pool = DatasetManifest::new(
            pool.records
                .iter()
                .map(|r| {
                    let mut r = r.clone();
                    r.label = None;
                    r
                })
                .collect(),
            pool.split,
            pool.base_dir.clone(),
        )?;
        merge_datasets(gold, &pseudo, &unlabeled_pool)?
    } else {
        gold.clone()
    };

    let mut stage = StageConfig::new(StageTag::FinetuneFull, seed);
    stage.epochs = settings.finetune_epochs;
    stage.batch_size = settings.batch_size;
    stage.learning_rate = settings.learning_rate;
    stage.val_fraction = settings.val_fraction;
    stage.weight_decay = 0.0;

    let loss = settings.loss.clone();
    let checkpoint = if strategy == Strategy::PretrainWeakSup {
        let graphs = crate::model::GroupGraphs::from_topology(topology);
        let mut ckpts = Vec::new();
        for kind in [
            crate::model::BranchKind::Keypoint,
            crate::model::BranchKind::Visual,
            crate::model::BranchKind::Text,
        ] {
            let mut pre = StageConfig::new(StageTag::for_branch(kind), seed);
            pre.epochs = settings.pretrain_epochs;
            pre.batch_size = settings.batch_size;
            pre.learning_rate = settings.learning_rate;
            pre.val_fraction = settings.val_fraction;
            pre.weight_decay = 0.0;
            let (_, ckpt) =
                pretrain_branch(&cfg, &graphs, kind, gold, &pre, &loss, &pipeline, None)?;
            ckpts.push(ckpt.ok_or_else(|| {
                Error::validation("pretraining produced no checkpoint".to_string())
            })?);
        }
        stage.lr_override = None;
        let (_, ckpt) = finetune_full(
            &cfg,
            topology,
            [&ckpts[0], &ckpts[1], &ckpts[2]],
            &dataset,
            &stage,
            &loss,
            &pipeline,
            None,
        )?;
        ckpt
    } else {
        stage.lr_override = Some(settings.learning_rate);
        let (_, ckpt) =
            train_full_from_scratch(&cfg, topology, &dataset, &stage, &loss, &pipeline, None)?;
        ckpt
    };
    let checkpoint =
        checkpoint.ok_or_else(|| Error::validation("training produced no checkpoint".to_string()))?;
    let mut model = TrimodalModel::new(cfg.clone(), topology, 0)?;
    model.params = checkpoint.params;

    if eval_samples_cache.is_none() {
        *eval_samples_cache = Some(load_dataset(eval_manifest)?);
    }
    let eval_samples = eval_samples_cache.as_ref().expect("cache filled");
    let evaluation = evaluate(&model, eval_samples, &pipeline, &settings.vote)?;
    Ok(evaluation.metrics.accuracy)
}

/// Sweep the grid, training and evaluating each configuration over every
/// seed. Rows finish in grid order; when the wall-clock budget expires the
/// table is returned as-is and flagged incomplete.
pub fn run_ablation(
    grid: &AblationGrid,
    gold: &DatasetManifest,
    pool: &DatasetManifest,
    eval_manifest: &DatasetManifest,
    topology: &Topology,
    settings: &AblationSettings,
) -> Result<AblationTable> {
    grid.validate()?;
    let started = Instant::now();
    let mut rows = Vec::new();
    let mut incomplete = false;
    let mut eval_cache: Option<Vec<LoadedSample>> = None;
    'outer: for &kind in &grid.encoders {
        for &offsets in &grid.offsets_on {
            for &strategy in &grid.strategies {
                let mut per_seed = Vec::with_capacity(grid.seeds.len());
                for &seed in &grid.seeds {
                    if started.elapsed().as_secs_f64() > settings.budget_seconds {
                        incomplete = true;
                        break 'outer;
                    }
                    per_seed.push(run_one_configuration(
                        kind,
                        offsets,
                        strategy,
                        seed,
                        gold,
                        pool,
                        &mut eval_cache,
                        eval_manifest,
                        topology,
                        settings,
                    )?);
                }
                let (mean_accuracy, spread) = mean_and_spread(&per_seed);
                rows.push(AblationRow {
                    encoder: kind.name().to_string(),
                    offsets,
                    strategy: strategy.name().to_string(),
                    per_seed_accuracy: per_seed,
                    mean_accuracy,
                    spread,
                });
            }
        }
    }
    Ok(AblationTable { rows, incomplete })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{LabelSource, SampleRecord, Split};
    use crate::encoders::{
        Activation, PositionalEncoding, Pooling, SpatialEncoderConfig, TemporalEncoderConfig,
        TextEncoderConfig,
    };
    use crate::featio::{write_keypoints_binary, write_text_tokens, write_visual_binary};
    use crate::keypoint_features::KEYPOINT_COUNT;
    use crate::seeding::{derive_sample_seed, seeded_rng};
    use rand::Rng;
    use tempfile::TempDir;

    #[test]
    fn majority_vote_and_tie_rule_oracles() {
        let v = vote_from_probabilities(&[0.6, 0.4, 0.7]).unwrap();
        assert_eq!(v.label, Label::Win);
        assert_eq!((v.votes_win, v.votes_loss), (2, 1));
        assert!(!v.tie_rule_used);
        let mean = (0.6 + 0.4 + 0.7) / 3.0;
        assert!((v.mean_win_probability - mean).abs() < 1e-15);

        // Two views disagree; the mean probability 0.55 decides for win.
        let v = vote_from_probabilities(&[0.7, 0.4]).unwrap();
        assert_eq!((v.votes_win, v.votes_loss), (1, 1));
        assert!(v.tie_rule_used);
        assert!((v.mean_win_probability - 0.55).abs() < 1e-12);
        assert_eq!(v.label, Label::Win);

        let v = vote_from_probabilities(&[0.6, 0.3]).unwrap();
        assert!(v.tie_rule_used);
        assert_eq!(v.label, Label::Loss);

        let v = vote_from_probabilities(&[0.9, 0.8, 0.7]).unwrap();
        assert!(!v.tie_rule_used, "unanimous votes must not consult the tie rule");

        assert!(vote_from_probabilities(&[]).is_err());
    }

    #[test]
    fn win_probability_is_a_softmax() {
        assert!((win_probability([0.0, 0.0]) - 0.5).abs() < 1e-15);
        assert!(win_probability([5.0, -5.0]) > 0.99);
        assert!(win_probability([-5.0, 5.0]) < 0.01);
        // Large logits stay finite.
        let p = win_probability([800.0, -800.0]);
        assert!(p.is_finite() && p > 0.999);
    }

    fn tiny_config() -> TrimodalConfig {
        TrimodalConfig {
            spatial: SpatialEncoderConfig {
                kind: SpatialKind::Mlp,
                node_feature_dim: 8,
                hidden_dim: 12,
                layer_count: 1,
                frame_embedding_dim: 8,
                activation: Activation::Relu,
                attention_heads: 2,
                epsilon_learnable: false,
            },
            keypoint_temporal: TemporalEncoderConfig {
                model_dim: 8,
                layer_count: 1,
                head_count: 2,
                feedforward_dim: 16,
                max_sequence_length: 32,
                positional_encoding: PositionalEncoding::Sinusoidal,
                dropout_rate: 0.0,
            },
            visual_temporal: TemporalEncoderConfig {
                model_dim: 8,
                layer_count: 1,
                head_count: 2,
                feedforward_dim: 16,
                max_sequence_length: 32,
                positional_encoding: PositionalEncoding::Sinusoidal,
                dropout_rate: 0.0,
            },
            text: TextEncoderConfig {
                vocabulary_size: 30,
                token_embedding_dim: 8,
                layer_count: 1,
                head_count: 2,
                max_tokens: 12,
                pooling: Pooling::Mean,
                dropout_rate: 0.0,
            },
            visual_width: 6,
            branch_dim: 8,
            fusion_activation: Activation::Relu,
        }
    }

    fn tiny_pipeline(cfg: &TrimodalConfig) -> FeaturePipeline {
        FeaturePipeline::from_config(
            cfg,
            SamplingSettings {
                keypoint_frames: 6,
                keypoint_min_gap: 0,
                visual_frames: 5,
                visual_min_gap: 6,
            },
        )
    }

    fn fixture_dataset(
        dir: &std::path::Path,
        prefix: &str,
        n_win: usize,
        n_loss: usize,
        seed: u64,
    ) -> DatasetManifest {
        let frames = 24usize;
        let visual_frames = 16usize;
        let mut records = Vec::new();
        let make = |label: Label, idx: usize, records: &mut Vec<SampleRecord>| {
            let sample_id = format!(
                "{prefix}{}{idx:03}",
                if label == Label::Win { "w" } else { "l" }
            );
            let mut rng = seeded_rng(derive_sample_seed(seed, "fixture", &sample_id, &[]));
            let mut kp = vec![0.0f32; frames * KEYPOINT_COUNT * 2];
            for t in 0..frames {
                for k in 0..KEYPOINT_COUNT {
                    let base = 0.4 + 0.05 * rng.gen_range(-1.0f64..=1.0);
                    let in_face = (25..95).contains(&k);
                    let in_hands = k >= 95;
                    let drift = 0.3 * t as f64 / frames as f64;
                    let x = match label {
                        Label::Win if in_face => base + drift,
                        Label::Loss if in_hands => base + drift,
                        _ => base,
                    };
                    kp[(t * KEYPOINT_COUNT + k) * 2] = x.clamp(0.0, 1.0) as f32;
                    kp[(t * KEYPOINT_COUNT + k) * 2 + 1] = base.clamp(0.0, 1.0) as f32;
                }
            }
            let kp_path = format!("{sample_id}.kpt");
            write_keypoints_binary(&dir.join(&kp_path), &kp).unwrap();
            let vis_bias = if label == Label::Win { 0.8 } else { -0.8 };
            let vis: Vec<f32> = (0..visual_frames * 6)
                .map(|_| (vis_bias + rng.gen_range(-0.3f64..=0.3)) as f32)
                .collect();
            let vis_path = format!("{sample_id}.vis");
            write_visual_binary(&dir.join(&vis_path), visual_frames, 6, &vis).unwrap();
            let token_base = if label == Label::Win { 3 } else { 17 };
            let tokens: Vec<usize> = (0..8).map(|_| token_base + rng.gen_range(0..4)).collect();
            let text_path = format!("{sample_id}.txt");
            write_text_tokens(&dir.join(&text_path), &tokens).unwrap();
            records.push(SampleRecord {
                sample_id,
                keypoint_path: kp_path.into(),
                visual_path: vis_path.into(),
                text_path: text_path.into(),
                label: Some(label),
                label_source: LabelSource::Gold,
                frame_count: frames,
            });
        };
        for i in 0..n_win {
            make(Label::Win, i, &mut records);
        }
        for i in 0..n_loss {
            make(Label::Loss, i, &mut records);
        }
        DatasetManifest::new(records, Split::Train, dir.to_path_buf()).unwrap()
    }

    #[test]
    fn single_view_vote_equals_single_pass() {
        let cfg = tiny_config();
        let model = TrimodalModel::new(cfg.clone(), &Topology::openpose_default(), 31).unwrap();
        let pipeline = tiny_pipeline(&cfg);
        let dir = TempDir::new().unwrap();
        let dataset = fixture_dataset(dir.path(), "a", 1, 0, 60);
        let sample = crate::training::load_sample(&dataset.records[0], dir.path()).unwrap();
        let vote_cfg = VoteConfig {
            views: 1,
            tie_rule: TieRule::MeanProbability,
            base_seed: 99,
        };
        let voted = predict_voted(&model, &sample, &pipeline, &vote_cfg).unwrap();

        let seed = derive_sample_seed(99, "vote_view", &sample.sample_id, &[0]);
        let inputs = pipeline.view_inputs(&sample, seed).unwrap();
        let p = win_probability(model.logits(&inputs).unwrap());
        assert_eq!(voted.mean_win_probability, p);
        assert_eq!(voted.label, if p >= 0.5 { Label::Win } else { Label::Loss });

        let again = predict_voted(&model, &sample, &pipeline, &vote_cfg).unwrap();
        assert_eq!(voted, again, "voting must be deterministic");
    }

    #[test]
    fn metrics_oracles() {
        // All correct: identity confusion.
        let all_correct: Vec<RecordPrediction> = (0..8)
            .map(|i| {
                let label = if i < 6 { Label::Win } else { Label::Loss };
                RecordPrediction {
                    sample_id: format!("s{i}"),
                    label,
                    prediction: label,
                    mean_win_probability: 0.5,
                }
            })
            .collect();
        let m = metrics_from_records(&all_correct).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.confusion, [[6, 0], [0, 2]]);

        // Constant `win` on a 75% win set: accuracy is the prior, loss
        // recall collapses to zero.
        let constant_win: Vec<RecordPrediction> = (0..16)
            .map(|i| RecordPrediction {
                sample_id: format!("s{i}"),
                label: if i < 12 { Label::Win } else { Label::Loss },
                prediction: Label::Win,
                mean_win_probability: 0.9,
            })
            .collect();
        let m = metrics_from_records(&constant_win).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.recall[Label::Loss.index()], 0.0);
        assert_eq!(m.recall[Label::Win.index()], 1.0);
        assert_eq!(m.sample_count, 16);
        // Invariant: accuracy = trace / count.
        let trace = (m.confusion[0][0] + m.confusion[1][1]) as f64;
        assert_eq!(m.accuracy, trace / m.sample_count as f64);

        assert!(metrics_from_records(&[]).is_err());
    }

    #[test]
    fn evaluate_matches_recount_from_emitted_records() {
        let cfg = tiny_config();
        let model = TrimodalModel::new(cfg.clone(), &Topology::openpose_default(), 33).unwrap();
        let pipeline = tiny_pipeline(&cfg);
        let dir = TempDir::new().unwrap();
        let dataset = fixture_dataset(dir.path(), "b", 3, 3, 61);
        let samples = load_dataset(&dataset).unwrap();
        let vote_cfg = VoteConfig {
            views: 3,
            tie_rule: TieRule::MeanProbability,
            base_seed: 5,
        };
        let evaluation = evaluate(&model, &samples, &pipeline, &vote_cfg).unwrap();

        // Recount accuracy from the audit CSV.
        let csv = predictions_csv(&evaluation.records);
        let mut correct = 0usize;
        let mut total = 0usize;
        for line in csv.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            total += 1;
            if cols[1] == cols[2] {
                correct += 1;
            }
        }
        assert_eq!(total, 6);
        assert_eq!(evaluation.metrics.accuracy, correct as f64 / total as f64);
    }

    #[test]
    fn evaluate_rejects_empty_and_unlabeled() {
        let cfg = tiny_config();
        let model = TrimodalModel::new(cfg.clone(), &Topology::openpose_default(), 34).unwrap();
        let pipeline = tiny_pipeline(&cfg);
        let vote_cfg = VoteConfig::default();
        assert!(evaluate(&model, &[], &pipeline, &vote_cfg).is_err());

        let dir = TempDir::new().unwrap();
        let dataset = fixture_dataset(dir.path(), "c", 1, 0, 62);
        let mut samples = load_dataset(&dataset).unwrap();
        samples[0].label = None;
        assert!(evaluate(&model, &samples, &pipeline, &vote_cfg).is_err());
    }

    fn quick_settings(cfg: TrimodalConfig) -> AblationSettings {
        AblationSettings {
            config: cfg,
            sampling: SamplingSettings {
                keypoint_frames: 6,
                keypoint_min_gap: 0,
                visual_frames: 5,
                visual_min_gap: 6,
            },
            offsets: OffsetConfig::default(),
            loss: FocalLossParams::default(),
            pretrain_epochs: 1,
            finetune_epochs: 1,
            batch_size: 4,
            learning_rate: 5e-3,
            val_fraction: 0.25,
            noise_rate: 0.2,
            vote: VoteConfig {
                views: 1,
                tie_rule: TieRule::MeanProbability,
                base_seed: 7,
            },
            budget_seconds: 600.0,
        }
    }

    #[test]
    fn ablation_grid_structure() {
        let dir = TempDir::new().unwrap();
        let gold = fixture_dataset(dir.path(), "g", 4, 4, 63);
        let pool_dir = TempDir::new().unwrap();
        let pool = fixture_dataset(pool_dir.path(), "p", 3, 3, 64);
        let eval_dir = TempDir::new().unwrap();
        let eval_manifest = fixture_dataset(eval_dir.path(), "e", 2, 2, 65);
        let grid = AblationGrid {
            encoders: vec![SpatialKind::Mlp, SpatialKind::Gcn],
            offsets_on: vec![true],
            strategies: vec![Strategy::Direct],
            seeds: vec![1, 2, 3],
        };
        let settings = quick_settings(tiny_config());
        let table = run_ablation(
            &grid,
            &gold,
            &pool,
            &eval_manifest,
            &Topology::openpose_default(),
            &settings,
        )
        .unwrap();
        assert!(!table.incomplete);
        assert_eq!(table.rows.len(), 2);
        for row in &table.rows {
            assert_eq!(row.per_seed_accuracy.len(), 3);
            let mean = row.per_seed_accuracy.iter().sum::<f64>() / 3.0;
            assert!((row.mean_accuracy - mean).abs() < 1e-12);
        }
        assert_eq!(table.rows[0].encoder, "mlp");
        assert_eq!(table.rows[1].encoder, "gcn");
        let csv = table.to_csv();
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn ablation_budget_exhaustion_flags_incomplete() {
        let dir = TempDir::new().unwrap();
        let gold = fixture_dataset(dir.path(), "g", 3, 3, 66);
        let grid = AblationGrid {
            encoders: vec![SpatialKind::Mlp],
            offsets_on: vec![true],
            strategies: vec![Strategy::Direct],
            seeds: vec![1],
        };
        let mut settings = quick_settings(tiny_config());
        settings.budget_seconds = 0.0;
        let table = run_ablation(
            &grid,
            &gold,
            &gold,
            &gold,
            &Topology::openpose_default(),
            &settings,
        )
        .unwrap();
        assert!(table.incomplete);
        assert!(table.rows.is_empty());
        assert!(table.to_csv().contains("INCOMPLETE"));

        let empty = AblationGrid {
            encoders: vec![],
            offsets_on: vec![true],
            strategies: vec![Strategy::Direct],
            seeds: vec![1],
        };
        assert!(run_ablation(
            &empty,
            &gold,
            &gold,
            &gold,
            &Topology::openpose_default(),
            &settings
        )
        .is_err());
    }

    #[test]
    fn weak_sup_strategy_trains_with_pseudo_labels() {
        let dir = TempDir::new().unwrap();
        let gold = fixture_dataset(dir.path(), "g", 4, 4, 67);
        let pool_dir = TempDir::new().unwrap();
        let pool = fixture_dataset(pool_dir.path(), "p", 3, 3, 68);
        let eval_dir = TempDir::new().unwrap();
        let eval_manifest = fixture_dataset(eval_dir.path(), "e", 2, 2, 69);
        let grid = AblationGrid {
            encoders: vec![SpatialKind::Mlp],
            offsets_on: vec![true],
            strategies: vec![Strategy::WeakSup],
            seeds: vec![4],
        };
        let settings = quick_settings(tiny_config());
        let table = run_ablation(
            &grid,
            &gold,
            &pool,
            &eval_manifest,
            &Topology::openpose_default(),
            &settings,
        )
        .unwrap();
        assert_eq!(table.rows.len(), 1);
        assert!(table.rows[0].per_seed_accuracy[0].is_finite());
    }
}
