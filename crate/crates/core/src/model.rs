//! The full trimodal classifier: keypoint, visual, and text branches each
//! produce a compressed vector; the three are concatenated, passed through
//! a residual fusion map, and classified into win/loss logits.
//!
//! Branches are addressable by parameter prefix (`keypoint.`, `visual.`,
//! `text.`) so stage-1 pretrained backbones drop into the full model by
//! name.

use crate::encoders::{
    init_spatial_params, init_text_params, init_transformer_params, spatial_encode, temporal_encode,
    temporal_encode_node, text_encode, Activation, GraphOperators, SpatialEncoderConfig,
    TemporalEncoderConfig, TextEncoderConfig,
};
use crate::error::{Error, Result};
use crate::graph_topology::{Group, Topology};
use crate::keypoint_features::FeatureTensor;
use crate::nn::{xavier_uniform, NodeId, ParameterSet, Tape};
use crate::seeding::{fnv1a, seeded_rng};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CLASS_COUNT: usize = 2;

/// Full-model architecture settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrimodalConfig {
    pub spatial: SpatialEncoderConfig,
    pub keypoint_temporal: TemporalEncoderConfig,
    pub visual_temporal: TemporalEncoderConfig,
    pub text: TextEncoderConfig,
    /// Per-frame visual embedding width the model expects.
    pub visual_width: usize,
    /// Width each branch is compressed to before fusion.
    pub branch_dim: usize,
    pub fusion_activation: Activation,
}

impl TrimodalConfig {
    pub fn validate(&self) -> Result<()> {
        self.spatial.validate()?;
        self.keypoint_temporal.validate()?;
        self.visual_temporal.validate()?;
        self.text.validate()?;
        if self.visual_width == 0 || self.branch_dim == 0 {
            return Err(Error::validation(
                "visual_width and branch_dim must be positive".to_string(),
            ));
        }
        Ok(())
    }

    pub fn fused_dim(&self) -> usize {
        3 * self.branch_dim
    }

    /// Stable hash of every architecture-relevant field; stored in
    /// checkpoints so weights cannot silently load into a different shape.
    pub fn fingerprint(&self) -> u64 {
        let s = self.canonical_string();
        fnv1a(s.as_bytes())
    }

    fn canonical_string(&self) -> String {
        let sp = &self.spatial;
        let kt = &self.keypoint_temporal;
        let vt = &self.visual_temporal;
        let tx = &self.text;
        format!(
            "spatial(kind={} f={} h={} l={} e={} act={:?} heads={} eps={})|\
             ktemp(d={} l={} h={} ff={} max={})|\
             vtemp(d={} l={} h={} ff={} max={})|\
             text(v={} e={} l={} h={} max={})|\
             visual_width={} branch_dim={} fusion={:?}",
            sp.kind.name(),
            sp.node_feature_dim,
            sp.hidden_dim,
            sp.layer_count,
            sp.frame_embedding_dim,
            sp.activation,
            sp.attention_heads,
            sp.epsilon_learnable,
            kt.model_dim,
            kt.layer_count,
            kt.head_count,
            kt.feedforward_dim,
            kt.max_sequence_length,
            vt.model_dim,
            vt.layer_count,
            vt.head_count,
            vt.feedforward_dim,
            vt.max_sequence_length,
            tx.vocabulary_size,
            tx.token_embedding_dim,
            tx.layer_count,
            tx.head_count,
            tx.max_tokens,
            self.visual_width,
            self.branch_dim,
            self.fusion_activation,
        )
    }
}

/// Adjacency operators for the three keypoint groups.
#[derive(Debug, Clone)]
pub struct GroupGraphs {
    pub skeleton: GraphOperators,
    pub face: GraphOperators,
    pub hands: GraphOperators,
}

impl GroupGraphs {
    pub fn from_topology(topology: &Topology) -> GroupGraphs {
        GroupGraphs {
            skeleton: GraphOperators::from_topology(topology, Group::Skeleton),
            face: GraphOperators::from_topology(topology, Group::Face),
            hands: GraphOperators::from_topology(topology, Group::Hands),
        }
    }
}

/// One sample's model-ready inputs, all three modalities present.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    pub keypoints: FeatureTensor,
    /// `[T_v, visual_width]` per-frame embeddings.
    pub visual: Array2<f64>,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    Keypoint,
    Visual,
    Text,
}

impl BranchKind {
    pub fn prefix(self) -> &'static str {
        match self {
            BranchKind::Keypoint => "keypoint.",
            BranchKind::Visual => "visual.",
            BranchKind::Text => "text.",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Keypoint => "keypoint",
            BranchKind::Visual => "visual",
            BranchKind::Text => "text",
        }
    }
}

fn init_keypoint_branch(
    params: &mut ParameterSet,
    cfg: &TrimodalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for group in Group::ALL {
        let base = format!("keypoint.{}", group.name());
        init_spatial_params(params, &format!("{base}.spatial"), &cfg.spatial, group.size(), rng)?;
        init_transformer_params(
            params,
            &format!("{base}.temporal"),
            &cfg.keypoint_temporal,
            Some(cfg.spatial.frame_embedding_dim),
            rng,
        )?;
    }
    let concat = 3 * cfg.keypoint_temporal.model_dim;
    params.insert("keypoint.compress_w", xavier_uniform(concat, cfg.branch_dim, rng))?;
    params.insert("keypoint.compress_b", Array2::zeros((1, cfg.branch_dim)))?;
    Ok(())
}

fn init_visual_branch(
    params: &mut ParameterSet,
    cfg: &TrimodalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    init_transformer_params(
        params,
        "visual.temporal",
        &cfg.visual_temporal,
        Some(cfg.visual_width),
        rng,
    )?;
    params.insert(
        "visual.compress_w",
        xavier_uniform(cfg.visual_temporal.model_dim, cfg.branch_dim, rng),
    )?;
    params.insert("visual.compress_b", Array2::zeros((1, cfg.branch_dim)))?;
    Ok(())
}

fn init_text_branch(
    params: &mut ParameterSet,
    cfg: &TrimodalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    init_text_params(params, "text.enc", &cfg.text, rng)?;
    params.insert(
        "text.compress_w",
        xavier_uniform(cfg.text.token_embedding_dim, cfg.branch_dim, rng),
    )?;
    params.insert("text.compress_b", Array2::zeros((1, cfg.branch_dim)))?;
    Ok(())
}

fn init_fusion(params: &mut ParameterSet, cfg: &TrimodalConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let fused = cfg.fused_dim();
    params.insert("fusion.w", xavier_uniform(fused, fused, rng))?;
    params.insert("fusion.b", Array2::zeros((1, fused)))?;
    params.insert("head.w", xavier_uniform(fused, CLASS_COUNT, rng))?;
    params.insert("head.b", Array2::zeros((1, CLASS_COUNT)))?;
    Ok(())
}

fn affine(
    tape: &mut Tape,
    params: &ParameterSet,
    x: NodeId,
    w_name: &str,
    b_name: &str,
) -> Result<NodeId> {
    let w = tape.param(w_name, params.get(w_name)?.clone());
    let b = tape.param(b_name, params.get(b_name)?.clone());
    let prod = tape.matmul(x, w)?;
    tape.add_row_vec(prod, b)
}

/// Keypoint branch: per group spatial then temporal encoding, the three
/// pooled vectors concatenated and compressed to `[1, branch_dim]`.
pub fn keypoint_branch(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &TrimodalConfig,
    graphs: &GroupGraphs,
    feats: &FeatureTensor,
) -> Result<NodeId> {
    if feats.feature_width() != cfg.spatial.node_feature_dim {
        return Err(Error::validation(format!(
            "keypoint feature width {} does not match configured {}",
            feats.feature_width(),
            cfg.spatial.node_feature_dim
        )));
    }
    let t = feats.n_frames();
    for (name, stream) in [
        ("skeleton", &feats.skeleton),
        ("face", &feats.face),
        ("hands", &feats.hands),
    ] {
        if stream.shape()[0] != t {
            return Err(Error::validation(format!(
                "group '{name}' has {} frames, expected {t}",
                stream.shape()[0]
            )));
        }
    }
    let mut pooled = Vec::with_capacity(3);
    for (group, stream, ops) in [
        (Group::Skeleton, &feats.skeleton, &graphs.skeleton),
        (Group::Face, &feats.face, &graphs.face),
        (Group::Hands, &feats.hands, &graphs.hands),
    ] {
        let base = format!("keypoint.{}", group.name());
        let frame_embeddings = spatial_encode(
            tape,
            params,
            &format!("{base}.spatial"),
            stream,
            Some(ops),
            &cfg.spatial,
        )?;
        let vec = temporal_encode_node(
            tape,
            params,
            &format!("{base}.temporal"),
            frame_embeddings,
            t,
            &cfg.keypoint_temporal,
            None,
        )?;
        pooled.push(vec);
    }
    let joined = tape.concat_cols(&pooled)?;
    affine(tape, params, joined, "keypoint.compress_w", "keypoint.compress_b")
}

/// Visual branch: transformer over per-frame embeddings, compressed.
pub fn visual_branch(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &TrimodalConfig,
    visual: &Array2<f64>,
) -> Result<NodeId> {
    if visual.ncols() != cfg.visual_width {
        return Err(Error::validation(format!(
            "visual frame width {} does not match configured {}",
            visual.ncols(),
            cfg.visual_width
        )));
    }
    let pooled = temporal_encode(
        tape,
        params,
        "visual.temporal",
        visual,
        visual.nrows(),
        &cfg.visual_temporal,
        None,
    )?;
    affine(tape, params, pooled, "visual.compress_w", "visual.compress_b")
}

/// Text branch: token transformer, compressed.
pub fn text_branch(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &TrimodalConfig,
    tokens: &[usize],
) -> Result<NodeId> {
    let pooled = text_encode(tape, params, "text.enc", tokens, &cfg.text)?;
    affine(tape, params, pooled, "text.compress_w", "text.compress_b")
}

/// Concatenate the three branch vectors, apply the dimension-preserving
/// residual fusion `x + act(Wx + b)`, and map to class logits.
pub fn fuse_and_classify(
    tape: &mut Tape,
    params: &ParameterSet,
    activation: Activation,
    branches: [NodeId; 3],
) -> Result<NodeId> {
    for b in branches {
        if tape.value(b).iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(
                "non-finite branch output entering fusion".to_string(),
            ));
        }
    }
    let x = tape.concat_cols(&branches)?;
    let pre = affine(tape, params, x, "fusion.w", "fusion.b")?;
    let act = activation.apply(tape, pre);
    let fused = tape.add(x, act)?;
    affine(tape, params, fused, "head.w", "head.b")
}

/// The assembled model: config, adjacency operators, and parameters.
#[derive(Debug, Clone)]
pub struct TrimodalModel {
    pub cfg: TrimodalConfig,
    pub graphs: GroupGraphs,
    pub params: ParameterSet,
}

impl TrimodalModel {
    pub fn new(cfg: TrimodalConfig, topology: &Topology, seed: u64) -> Result<TrimodalModel> {
        cfg.validate()?;
        let mut params = ParameterSet::new();
        let mut rng = seeded_rng(seed);
        init_keypoint_branch(&mut params, &cfg, &mut rng)?;
        init_visual_branch(&mut params, &cfg, &mut rng)?;
        init_text_branch(&mut params, &cfg, &mut rng)?;
        init_fusion(&mut params, &cfg, &mut rng)?;
        Ok(TrimodalModel {
            cfg,
            graphs: GroupGraphs::from_topology(topology),
            params,
        })
    }

    /// Full forward pass to `[1, 2]` logits.
    pub fn forward(&self, tape: &mut Tape, inputs: &ModelInputs) -> Result<NodeId> {
        forward_full(tape, &self.params, &self.cfg, &self.graphs, inputs)
    }

    /// Forward with an explicit parameter set (training perturbs copies).
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        inputs: &ModelInputs,
    ) -> Result<NodeId> {
        forward_full(tape, params, &self.cfg, &self.graphs, inputs)
    }

    /// Plain-array logits for inference.
    pub fn logits(&self, inputs: &ModelInputs) -> Result<[f64; 2]> {
        let mut tape = Tape::new();
        let node = self.forward(&mut tape, inputs)?;
        let v = tape.value(node);
        Ok([v[[0, 0]], v[[0, 1]]])
    }
}

/// Composition of the three branches and the fusion head.
pub fn forward_full(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &TrimodalConfig,
    graphs: &GroupGraphs,
    inputs: &ModelInputs,
) -> Result<NodeId> {
    if inputs.tokens.is_empty() {
        return Err(Error::validation("text modality missing (no tokens)".to_string()));
    }
    if inputs.visual.nrows() == 0 {
        return Err(Error::validation("visual modality missing (no frames)".to_string()));
    }
    let k = keypoint_branch(tape, params, cfg, graphs, &inputs.keypoints)?;
    let v = visual_branch(tape, params, cfg, &inputs.visual)?;
    let t = text_branch(tape, params, cfg, &inputs.tokens)?;
    fuse_and_classify(tape, params, cfg.fusion_activation, [k, v, t])
}

/// Build a standalone branch parameter set with a temporary stage-1
/// classification head (`stage1.head_*`, discarded on adoption).
pub fn init_branch_with_head(
    cfg: &TrimodalConfig,
    kind: BranchKind,
    seed: u64,
) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut params = ParameterSet::new();
    let mut rng = seeded_rng(seed);
    match kind {
        BranchKind::Keypoint => init_keypoint_branch(&mut params, cfg, &mut rng)?,
        BranchKind::Visual => init_visual_branch(&mut params, cfg, &mut rng)?,
        BranchKind::Text => init_text_branch(&mut params, cfg, &mut rng)?,
    }
    params.insert(
        "stage1.head_w",
        xavier_uniform(cfg.branch_dim, CLASS_COUNT, &mut rng),
    )?;
    params.insert("stage1.head_b", Array2::zeros((1, CLASS_COUNT)))?;
    Ok(params)
}

/// Stage-1 logits for one branch: branch vector through the temp head.
pub fn branch_logits(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &TrimodalConfig,
    graphs: &GroupGraphs,
    kind: BranchKind,
    inputs: &ModelInputs,
) -> Result<NodeId> {
    let vec = match kind {
        BranchKind::Keypoint => keypoint_branch(tape, params, cfg, graphs, &inputs.keypoints)?,
        BranchKind::Visual => visual_branch(tape, params, cfg, &inputs.visual)?,
        BranchKind::Text => text_branch(tape, params, cfg, &inputs.tokens)?,
    };
    affine(tape, params, vec, "stage1.head_w", "stage1.head_b")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageTag {
    PretrainKeypoint,
    PretrainVisual,
    PretrainText,
    FinetuneFull,
}

impl StageTag {
    fn code(self) -> u8 {
        match self {
            StageTag::PretrainKeypoint => 0,
            StageTag::PretrainVisual => 1,
            StageTag::PretrainText => 2,
            StageTag::FinetuneFull => 3,
        }
    }

    fn from_code(c: u8) -> Result<StageTag> {
        match c {
            0 => Ok(StageTag::PretrainKeypoint),
            1 => Ok(StageTag::PretrainVisual),
            2 => Ok(StageTag::PretrainText),
            3 => Ok(StageTag::FinetuneFull),
            other => Err(Error::Checkpoint(format!("unknown stage code {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StageTag::PretrainKeypoint => "pretrain_keypoint",
            StageTag::PretrainVisual => "pretrain_visual",
            StageTag::PretrainText => "pretrain_text",
            StageTag::FinetuneFull => "finetune_full",
        }
    }

    pub fn for_branch(kind: BranchKind) -> StageTag {
        match kind {
            BranchKind::Keypoint => StageTag::PretrainKeypoint,
            BranchKind::Visual => StageTag::PretrainVisual,
            BranchKind::Text => StageTag::PretrainText,
        }
    }
}

/// A saved training state: weights plus enough metadata to refuse loading
/// into the wrong architecture.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub config_fingerprint: u64,
    pub stage: StageTag,
    pub epoch: u32,
    pub val_accuracy: f64,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"EMCK0001";

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&checkpoint.config_fingerprint.to_le_bytes())?;
    w.write_all(&[checkpoint.stage.code()])?;
    w.write_all(&checkpoint.epoch.to_le_bytes())?;
    w.write_all(&checkpoint.val_accuracy.to_le_bytes())?;
    let count = checkpoint.params.len() as u32;
    w.write_all(&count.to_le_bytes())?;
    for (name, tensor) in checkpoint.params.iter() {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("parameter name too long: {name}")));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(tensor.nrows() as u32).to_le_bytes())?;
        w.write_all(&(tensor.ncols() as u32).to_le_bytes())?;
        for &v in tensor.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint. When `expected_fingerprint` is provided it must
/// match the stored one; pass `None` to override deliberately.
pub fn load_checkpoint(path: &Path, expected_fingerprint: Option<u64>) -> Result<Checkpoint> {
    let file = fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let config_fingerprint = u64::from_le_bytes(u64buf);
    if let Some(expected) = expected_fingerprint {
        if expected != config_fingerprint {
            return Err(Error::Checkpoint(format!(
                "config fingerprint mismatch: checkpoint {config_fingerprint:#018x}, expected {expected:#018x}"
            )));
        }
    }
    let mut byte = [0u8; 1];
    r.read_exact(&mut byte)?;
    let stage = StageTag::from_code(byte[0])?;
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let epoch = u32::from_le_bytes(u32buf);
    r.read_exact(&mut u64buf)?;
    let val_accuracy = f64::from_le_bytes(u64buf);
    r.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf);
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf)?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".to_string()))?;
        r.read_exact(&mut u32buf)?;
        let rows = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let cols = u32::from_le_bytes(u32buf) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut u64buf)?;
            data.push(f64::from_le_bytes(u64buf));
        }
        let tensor = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?;
        params.insert(&name, tensor)?;
    }
    Ok(Checkpoint {
        params,
        config_fingerprint,
        stage,
        epoch,
        val_accuracy,
    })
}

/// Copy one pretrained branch from `checkpoint` into `model`, skipping the
/// stage-1 head. Returns the names that changed value.
pub fn adopt_branch(
    model: &mut TrimodalModel,
    checkpoint: &Checkpoint,
    kind: BranchKind,
) -> Result<Vec<String>> {
    let expected_stage = StageTag::for_branch(kind);
    if checkpoint.stage != expected_stage {
        return Err(Error::Checkpoint(format!(
            "checkpoint stage {} does not provide branch '{}'",
            checkpoint.stage.name(),
            kind.name()
        )));
    }
    let before = model.params.clone();
    model.params.adopt_prefixed(&checkpoint.params, kind.prefix())?;
    let mut changed: Vec<String> = model
        .params
        .iter()
        .filter(|(name, value)| before.get(name).map(|old| old != *value).unwrap_or(true))
        .map(|(name, _)| name.to_string())
        .collect();
    changed.sort();
    Ok(changed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{PositionalEncoding, Pooling, SpatialKind};
    use crate::keypoint_features::{
        build_feature_tensor, GroupSpec, KeypointSequence, OffsetConfig, KEYPOINT_COUNT,
    };
    use crate::nn::check_gradients;
    use crate::seeding::seeded_rng;
    use ndarray::Array3;
    use rand::Rng;
    use tempfile::TempDir;

    /// Desk-scale config small enough for tests.
    pub(crate) fn tiny_config() -> TrimodalConfig {
        TrimodalConfig {
            spatial: SpatialEncoderConfig {
                kind: SpatialKind::Mlp,
                node_feature_dim: 8,
                hidden_dim: 16,
                layer_count: 2,
                frame_embedding_dim: 12,
                activation: Activation::Relu,
                attention_heads: 2,
                epsilon_learnable: false,
            },
            keypoint_temporal: TemporalEncoderConfig {
                model_dim: 16,
                layer_count: 1,
                head_count: 2,
                feedforward_dim: 32,
                max_sequence_length: 64,
                positional_encoding: PositionalEncoding::Sinusoidal,
                dropout_rate: 0.0,
            },
            visual_temporal: TemporalEncoderConfig {
                model_dim: 16,
                layer_count: 1,
                head_count: 2,
                feedforward_dim: 32,
                max_sequence_length: 64,
                positional_encoding: PositionalEncoding::Sinusoidal,
                dropout_rate: 0.0,
            },
            text: TextEncoderConfig {
                vocabulary_size: 40,
                token_embedding_dim: 16,
                layer_count: 1,
                head_count: 2,
                max_tokens: 24,
                pooling: Pooling::Mean,
                dropout_rate: 0.0,
            },
            visual_width: 10,
            branch_dim: 20,
            fusion_activation: Activation::Relu,
        }
    }

    pub(crate) fn tiny_inputs(seed: u64) -> ModelInputs {
        let mut rng = seeded_rng(seed);
        let coords = Array3::from_shape_fn((40, KEYPOINT_COUNT, 2), |_| rng.gen_range(0.0..=1.0));
        let seq = KeypointSequence::new(coords).unwrap();
        let feats = build_feature_tensor(
            &seq,
            &OffsetConfig::default(),
            &GroupSpec::default(),
            &[0, 7, 15, 22, 30, 39],
        )
        .unwrap();
        let visual = Array2::from_shape_fn((12, 10), |_| rng.gen_range(-1.0..=1.0));
        let tokens = (0..10).map(|_| rng.gen_range(0..40)).collect();
        ModelInputs {
            keypoints: feats,
            visual,
            tokens,
        }
    }

    #[test]
    fn forward_produces_finite_logits_deterministically() {
        let model = TrimodalModel::new(tiny_config(), &Topology::openpose_default(), 5).unwrap();
        let inputs = tiny_inputs(9);
        let a = model.logits(&inputs).unwrap();
        let b = model.logits(&inputs).unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, b, "same inputs and weights must give bit-identical logits");
    }

    #[test]
    fn branch_shapes_and_zero_compression() {
        let model = TrimodalModel::new(tiny_config(), &Topology::openpose_default(), 6).unwrap();
        let inputs = tiny_inputs(10);
        let mut tape = Tape::new();
        let k = keypoint_branch(&mut tape, &model.params, &model.cfg, &model.graphs, &inputs.keypoints)
            .unwrap();
        assert_eq!(tape.value(k).shape(), &[1, 20]);

        let mut zeroed = model.params.clone();
        let shape = zeroed.get("keypoint.compress_w").unwrap().raw_dim();
        zeroed.set("keypoint.compress_w", Array2::zeros(shape)).unwrap();
        let mut tape2 = Tape::new();
        let kz = keypoint_branch(&mut tape2, &zeroed, &model.cfg, &model.graphs, &inputs.keypoints)
            .unwrap();
        assert!(tape2.value(kz).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swapping_face_and_hands_changes_output() {
        let model = TrimodalModel::new(tiny_config(), &Topology::openpose_default(), 7).unwrap();
        let inputs = tiny_inputs(11);
        let feats = &inputs.keypoints;
        // Hands and face have different widths, so emulate the swap with
        // same-width streams: feed the face stream where hands usually go
        // is shape-invalid; instead permute via two same-shape tensors.
        // Swap is expressed by exchanging the two streams' contents over
        // the first 42 face rows.
        let mut swapped = feats.clone();
        let face_cut = swapped.face.slice(ndarray::s![.., 0..42, ..]).to_owned();
        let hands_all = swapped.hands.clone();
        swapped
            .face
            .slice_mut(ndarray::s![.., 0..42, ..])
            .assign(&hands_all);
        swapped.hands.assign(&face_cut);
        let mut t1 = Tape::new();
        let a = keypoint_branch(&mut t1, &model.params, &model.cfg, &model.graphs, feats).unwrap();
        let mut t2 = Tape::new();
        let b = keypoint_branch(&mut t2, &model.params, &model.cfg, &model.graphs, &swapped).unwrap();
        let diff = t1
            .value(a)
            .iter()
            .zip(t2.value(b).iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 1e-9, "stream contents must matter to the output");
    }

    #[test]
    fn fusion_residual_identity_and_bias_passthrough() {
        let cfg = tiny_config();
        let fused_dim = cfg.fused_dim();
        let mut params = ParameterSet::new();
        params.insert("fusion.w", Array2::zeros((fused_dim, fused_dim))).unwrap();
        params.insert("fusion.b", Array2::zeros((1, fused_dim))).unwrap();
        params.insert("head.w", Array2::zeros((fused_dim, 2))).unwrap();
        let mut head_b = Array2::zeros((1, 2));
        head_b[[0, 0]] = 0.3;
        head_b[[0, 1]] = -0.3;
        params.insert("head.b", head_b).unwrap();

        let mut rng = seeded_rng(12);
        let mut tape = Tape::new();
        let parts: Vec<NodeId> = (0..3)
            .map(|_| {
                tape.input(Array2::from_shape_fn((1, cfg.branch_dim), |_| {
                    rng.gen_range(-1.0..=1.0)
                }))
            })
            .collect();
        let logits =
            fuse_and_classify(&mut tape, &params, Activation::Relu, [parts[0], parts[1], parts[2]])
                .unwrap();
        let v = tape.value(logits);
        assert!((v[[0, 0]] - 0.3).abs() < 1e-15);
        assert!((v[[0, 1]] + 0.3).abs() < 1e-15);
    }

    #[test]
    fn fusion_matches_straight_line_recomputation() {
        let cfg = tiny_config();
        let fused_dim = cfg.fused_dim();
        let mut rng = seeded_rng(13);
        let mut params = ParameterSet::new();
        params
            .insert("fusion.w", xavier_uniform(fused_dim, fused_dim, &mut rng))
            .unwrap();
        params
            .insert("fusion.b", xavier_uniform(1, fused_dim, &mut rng))
            .unwrap();
        params.insert("head.w", xavier_uniform(fused_dim, 2, &mut rng)).unwrap();
        params.insert("head.b", xavier_uniform(1, 2, &mut rng)).unwrap();
        let branch_vals: Vec<Array2<f64>> = (0..3)
            .map(|_| Array2::from_shape_fn((1, cfg.branch_dim), |_| rng.gen_range(-1.0..=1.0)))
            .collect();
        let mut tape = Tape::new();
        let nodes: Vec<NodeId> = branch_vals.iter().map(|v| tape.input(v.clone())).collect();
        let logits =
            fuse_and_classify(&mut tape, &params, Activation::Relu, [nodes[0], nodes[1], nodes[2]])
                .unwrap();
        let got = tape.value(logits).clone();

        let x = ndarray::concatenate(
            ndarray::Axis(1),
            &[branch_vals[0].view(), branch_vals[1].view(), branch_vals[2].view()],
        )
        .unwrap();
        let pre = x.dot(params.get("fusion.w").unwrap()) + params.get("fusion.b").unwrap();
        let fused = &x + &pre.mapv(|v| v.max(0.0));
        let want = fused.dot(params.get("head.w").unwrap()) + params.get("head.b").unwrap();
        for j in 0..2 {
            assert!(
                (got[[0, j]] - want[[0, j]]).abs() <= 1e-12,
                "logit {j}: {} vs {}",
                got[[0, j]],
                want[[0, j]]
            );
        }
    }

    #[test]
    fn non_finite_branch_rejected() {
        let cfg = tiny_config();
        let fused_dim = cfg.fused_dim();
        let mut params = ParameterSet::new();
        params.insert("fusion.w", Array2::zeros((fused_dim, fused_dim))).unwrap();
        params.insert("fusion.b", Array2::zeros((1, fused_dim))).unwrap();
        params.insert("head.w", Array2::zeros((fused_dim, 2))).unwrap();
        params.insert("head.b", Array2::zeros((1, 2))).unwrap();
        let mut tape = Tape::new();
        let good = tape.input(Array2::zeros((1, cfg.branch_dim)));
        let bad = tape.input(Array2::from_elem((1, cfg.branch_dim), f64::NAN));
        assert!(fuse_and_classify(&mut tape, &params, Activation::Relu, [good, bad, good]).is_err());
    }

    #[test]
    fn full_model_gradients_at_tiny_dims() {
        let mut cfg = tiny_config();
        cfg.spatial.hidden_dim = 4;
        cfg.spatial.frame_embedding_dim = 4;
        cfg.spatial.layer_count = 1;
        cfg.keypoint_temporal.model_dim = 4;
        cfg.keypoint_temporal.head_count = 1;
        cfg.keypoint_temporal.feedforward_dim = 6;
        cfg.visual_temporal.model_dim = 4;
        cfg.visual_temporal.head_count = 1;
        cfg.visual_temporal.feedforward_dim = 6;
        cfg.text.token_embedding_dim = 4;
        cfg.text.head_count = 1;
        cfg.text.vocabulary_size = 8;
        cfg.visual_width = 3;
        cfg.branch_dim = 4;
        let model = TrimodalModel::new(cfg, &Topology::openpose_default(), 14).unwrap();
        let mut rng = seeded_rng(15);
        let coords = Array3::from_shape_fn((12, KEYPOINT_COUNT, 2), |_| rng.gen_range(0.0..=1.0));
        let seq = KeypointSequence::new(coords).unwrap();
        let feats =
            build_feature_tensor(&seq, &OffsetConfig::default(), &GroupSpec::default(), &[0, 5, 11])
                .unwrap();
        let inputs = ModelInputs {
            keypoints: feats,
            visual: Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..=1.0)),
            tokens: vec![1, 5, 2],
        };
        let report = check_gradients(&model.params, 1e-5, |tape, p| {
            let logits = model.forward_with(tape, p, &inputs)?;
            let weights = tape.input(Array2::from_shape_vec((1, 2), vec![0.8, -0.6]).unwrap());
            let prod = tape.mul(logits, weights)?;
            Ok(tape.sum_all(prod))
        })
        .unwrap();
        assert!(
            report.max_rel_error <= 1e-4,
            "{} at {}",
            report.max_rel_error,
            report.worst
        );
        assert!(report.unchecked.is_empty(), "{:?}", report.unchecked);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = TempDir::new().unwrap();
        let model = TrimodalModel::new(tiny_config(), &Topology::openpose_default(), 16).unwrap();
        let inputs = tiny_inputs(17);
        let before = model.logits(&inputs).unwrap();
        let ckpt = Checkpoint {
            params: model.params.clone(),
            config_fingerprint: model.cfg.fingerprint(),
            stage: StageTag::FinetuneFull,
            epoch: 3,
            val_accuracy: 0.8125,
        };
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path, Some(model.cfg.fingerprint())).unwrap();
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.stage, StageTag::FinetuneFull);
        assert_eq!(loaded.val_accuracy, 0.8125);
        assert_eq!(loaded.params, model.params);
        let mut restored = model.clone();
        restored.params = loaded.params;
        let after = restored.logits(&inputs).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn checkpoint_fingerprint_mismatch_rejected() {
        let dir = TempDir::new().unwrap();
        let model = TrimodalModel::new(tiny_config(), &Topology::openpose_default(), 18).unwrap();
        let ckpt = Checkpoint {
            params: model.params.clone(),
            config_fingerprint: 999,
            stage: StageTag::FinetuneFull,
            epoch: 0,
            val_accuracy: 0.0,
        };
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        assert!(load_checkpoint(&path, Some(1000)).is_err());
        assert!(load_checkpoint(&path, None).is_ok());
    }

    #[test]
    fn adopting_branch_changes_only_that_branch() {
        let cfg = tiny_config();
        let mut model = TrimodalModel::new(cfg.clone(), &Topology::openpose_default(), 19).unwrap();
        let branch = init_branch_with_head(&cfg, BranchKind::Visual, 777).unwrap();
        let ckpt = Checkpoint {
            params: branch,
            config_fingerprint: cfg.fingerprint(),
            stage: StageTag::PretrainVisual,
            epoch: 1,
            val_accuracy: 0.5,
        };
        let changed = adopt_branch(&mut model, &ckpt, BranchKind::Visual).unwrap();
        assert!(!changed.is_empty());
        assert!(
            changed.iter().all(|n| n.starts_with("visual.")),
            "non-visual parameters changed: {changed:?}"
        );
        assert!(!model.params.contains("stage1.head_w"));
        // Wrong stage is refused.
        let ckpt2 = Checkpoint {
            params: model.params.clone(),
            config_fingerprint: cfg.fingerprint(),
            stage: StageTag::PretrainVisual,
            epoch: 1,
            val_accuracy: 0.5,
        };
        assert!(adopt_branch(&mut model, &ckpt2, BranchKind::Keypoint).is_err());
    }

    #[test]
    fn visual_width_mismatch_rejected() {
        let model = TrimodalModel::new(tiny_config(), &Topology::openpose_default(), 20).unwrap();
        let mut inputs = tiny_inputs(21);
        inputs.visual = Array2::zeros((5, 7));
        assert!(model.logits(&inputs).is_err());
    }
}
