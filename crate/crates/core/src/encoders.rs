//! Trainable encoder blocks: four interchangeable per-frame spatial
//! encoders over keypoint graphs, a transformer stack shared by the
//! temporal and text paths, and the compact text encoder.
//!
//! Every encoder is a pure function `(tape, params, prefix, input) -> node`
//! so the same code serves training (with gradients) and inference.

use crate::error::{Error, Result};
use crate::graph_topology::{self, Group, NormalizedAdjacency, Topology};
use crate::nn::{xavier_uniform, NodeId, ParameterSet, Tape};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

/// Negative-slope constant for attention score activation.
const ATTENTION_LEAK: f64 = 0.2;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialKind {
    Mlp,
    Gcn,
    Gat,
    Gin,
}

impl SpatialKind {
    pub const ALL: [SpatialKind; 4] = [
        SpatialKind::Mlp,
        SpatialKind::Gcn,
        SpatialKind::Gat,
        SpatialKind::Gin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SpatialKind::Mlp => "mlp",
            SpatialKind::Gcn => "gcn",
            SpatialKind::Gat => "gat",
            SpatialKind::Gin => "gin",
        }
    }

    pub fn parse(s: &str) -> Result<SpatialKind> {
        match s {
            "mlp" => Ok(SpatialKind::Mlp),
            "gcn" => Ok(SpatialKind::Gcn),
            "gat" => Ok(SpatialKind::Gat),
            "gin" => Ok(SpatialKind::Gin),
            other => Err(Error::parse(format!("unknown spatial encoder '{other}'"))),
        }
    }

    pub fn needs_adjacency(self) -> bool {
        !matches!(self, SpatialKind::Mlp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    /// Pass-through; exists so identity configurations are expressible.
    Linear,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Result<Activation> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "linear" => Ok(Activation::Linear),
            _ => Err(Error::parse(format!("unknown activation '{s}'"))),
        }
    }

    pub fn apply(self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Linear => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialEncoderConfig {
    pub kind: SpatialKind,
    pub node_feature_dim: usize,
    pub hidden_dim: usize,
    pub layer_count: usize,
    pub frame_embedding_dim: usize,
    pub activation: Activation,
    /// Attention heads; read only by the `gat` kind.
    pub attention_heads: usize,
    /// Whether the `gin` self-weight ε is a trainable parameter.
    pub epsilon_learnable: bool,
}

impl SpatialEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.node_feature_dim == 0
            || self.hidden_dim == 0
            || self.layer_count == 0
            || self.frame_embedding_dim == 0
        {
            return Err(Error::validation(
                "spatial encoder dimensions must be positive".to_string(),
            ));
        }
        if self.kind == SpatialKind::Gat {
            if self.attention_heads == 0 {
                return Err(Error::validation(
                    "gat requires at least one attention head".to_string(),
                ));
            }
            if self.hidden_dim % self.attention_heads != 0 {
                return Err(Error::validation(format!(
                    "hidden_dim {} not divisible by {} heads",
                    self.hidden_dim, self.attention_heads
                )));
            }
        }
        Ok(())
    }
}

/// The adjacency views a spatial encoder may need, built once per group.
#[derive(Debug, Clone)]
pub struct GraphOperators {
    /// D^{−1/2}(A+I)D^{−1/2} for mean-style aggregation.
    pub normalized: Rc<Array2<f64>>,
    /// Plain 0/1 adjacency without self-loops for sum aggregation.
    pub raw: Rc<Array2<f64>>,
    /// True where attention may look: edges plus the diagonal.
    pub attention_mask: Rc<Array2<bool>>,
}

impl GraphOperators {
    pub fn from_topology(topology: &Topology, group: Group) -> GraphOperators {
        let normalized = graph_topology::build_normalized_adjacency(topology, group);
        GraphOperators::from_parts(normalized, graph_topology::raw_adjacency(topology, group))
    }

    pub fn from_parts(normalized: NormalizedAdjacency, raw: Array2<f64>) -> GraphOperators {
        let n = raw.nrows();
        let mask = Array2::from_shape_fn((n, n), |(i, j)| i == j || raw[[i, j]] != 0.0);
        GraphOperators {
            normalized: Rc::new(normalized.matrix),
            raw: Rc::new(raw),
            attention_mask: Rc::new(mask),
        }
    }

    pub fn node_count(&self) -> usize {
        self.raw.nrows()
    }
}

/// Layer input/output widths for the configured stack.
fn mlp_layer_dims(cfg: &SpatialEncoderConfig, n_nodes: usize) -> Vec<(usize, usize)> {
    let input = n_nodes * cfg.node_feature_dim;
    let l = cfg.layer_count;
    (0..l)
        .map(|i| {
            let d_in = if i == 0 { input } else { cfg.hidden_dim };
            let d_out = if i == l - 1 { cfg.frame_embedding_dim } else { cfg.hidden_dim };
            (d_in, d_out)
        })
        .collect()
}

fn graph_layer_dims(cfg: &SpatialEncoderConfig) -> Vec<(usize, usize)> {
    (0..cfg.layer_count)
        .map(|i| {
            let d_in = if i == 0 { cfg.node_feature_dim } else { cfg.hidden_dim };
            (d_in, cfg.hidden_dim)
        })
        .collect()
}

/// Create all parameters for one spatial encoder under `prefix`.
pub fn init_spatial_params(
    params: &mut ParameterSet,
    prefix: &str,
    cfg: &SpatialEncoderConfig,
    n_nodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    match cfg.kind {
        SpatialKind::Mlp => {
            for (i, (d_in, d_out)) in mlp_layer_dims(cfg, n_nodes).into_iter().enumerate() {
                params.insert(&format!("{prefix}.w{i}"), xavier_uniform(d_in, d_out, rng))?;
                params.insert(&format!("{prefix}.b{i}"), Array2::zeros((1, d_out)))?;
            }
        }
        SpatialKind::Gcn => {
            for (i, (d_in, d_out)) in graph_layer_dims(cfg).into_iter().enumerate() {
                params.insert(&format!("{prefix}.w{i}"), xavier_uniform(d_in, d_out, rng))?;
                params.insert(&format!("{prefix}.b{i}"), Array2::zeros((1, d_out)))?;
            }
            init_flatten(params, prefix, cfg, n_nodes, rng)?;
        }
        SpatialKind::Gat => {
            let head_dim = cfg.hidden_dim / cfg.attention_heads;
            for (i, (d_in, _)) in graph_layer_dims(cfg).into_iter().enumerate() {
                for h in 0..cfg.attention_heads {
                    let base = format!("{prefix}.l{i}.h{h}");
                    params.insert(&format!("{base}.w"), xavier_uniform(d_in, head_dim, rng))?;
                    params.insert(&format!("{base}.a_src"), xavier_uniform(head_dim, 1, rng))?;
                    params.insert(&format!("{base}.a_dst"), xavier_uniform(head_dim, 1, rng))?;
                }
                params.insert(&format!("{prefix}.l{i}.bias"), Array2::zeros((1, cfg.hidden_dim)))?;
            }
            init_flatten(params, prefix, cfg, n_nodes, rng)?;
        }
        SpatialKind::Gin => {
            for (i, (d_in, d_out)) in graph_layer_dims(cfg).into_iter().enumerate() {
                let base = format!("{prefix}.l{i}");
                params.insert(&format!("{base}.w1"), xavier_uniform(d_in, cfg.hidden_dim, rng))?;
                params.insert(&format!("{base}.b1"), Array2::zeros((1, cfg.hidden_dim)))?;
                params.insert(&format!("{base}.w2"), xavier_uniform(cfg.hidden_dim, d_out, rng))?;
                params.insert(&format!("{base}.b2"), Array2::zeros((1, d_out)))?;
                if cfg.epsilon_learnable {
                    params.insert(&format!("{base}.eps"), Array2::zeros((1, 1)))?;
                }
            }
            init_flatten(params, prefix, cfg, n_nodes, rng)?;
        }
    }
    Ok(())
}

fn init_flatten(
    params: &mut ParameterSet,
    prefix: &str,
    cfg: &SpatialEncoderConfig,
    n_nodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let flat_in = n_nodes * cfg.hidden_dim;
    params.insert(
        &format!("{prefix}.flat_w"),
        xavier_uniform(flat_in, cfg.frame_embedding_dim, rng),
    )?;
    params.insert(
        &format!("{prefix}.flat_b"),
        Array2::zeros((1, cfg.frame_embedding_dim)),
    )?;
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

/// Encode per-frame keypoint features `[T, n, F]` into frame embeddings
/// `[T, E_f]`. Graph kinds require `graph`; the MLP ignores it.
pub fn spatial_encode(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    frames: &Array3<f64>,
    graph: Option<&GraphOperators>,
    cfg: &SpatialEncoderConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let (t, n, f) = {
        let s = frames.shape();
        (s[0], s[1], s[2])
    };
    if t == 0 {
        return Err(Error::validation("no frames to encode".to_string()));
    }
    if f != cfg.node_feature_dim {
        return Err(Error::validation(format!(
            "feature width {f} does not match configured {}",
            cfg.node_feature_dim
        )));
    }
    if cfg.kind.needs_adjacency() {
        let ops = graph.ok_or_else(|| {
            Error::validation(format!("{} encoder requires adjacency", cfg.kind.name()))
        })?;
        if ops.node_count() != n {
            return Err(Error::validation(format!(
                "adjacency is over {} nodes but frames have {n}",
                ops.node_count()
            )));
        }
    }
    let flat: Vec<f64> = frames.iter().copied().collect();
    match cfg.kind {
        SpatialKind::Mlp => {
            // [T, n*F]: concatenate each frame's node features.
            let x0 = tape.input(
                Array2::from_shape_vec((t, n * f), flat).expect("contiguous reshape"),
            );
            let mut x = x0;
            for i in 0..cfg.layer_count {
                let y = affine(tape, params, x, &format!("{prefix}.w{i}"), &format!("{prefix}.b{i}"))?;
                x = cfg.activation.apply(tape, y);
            }
            Ok(x)
        }
        SpatialKind::Gcn => {
            // Frames stacked as [T*n, F]; aggregation applies Â per block.
            let adj = graph.unwrap().normalized.clone();
            let x0 = tape.input(
                Array2::from_shape_vec((t * n, f), flat).expect("contiguous reshape"),
            );
            let mut x = x0;
            for i in 0..cfg.layer_count {
                let agg = tape.block_matmul_const(adj.clone(), x)?;
                let y = affine(tape, params, agg, &format!("{prefix}.w{i}"), &format!("{prefix}.b{i}"))?;
                x = cfg.activation.apply(tape, y);
            }
            let per_frame = tape.reshape(x, t, n * cfg.hidden_dim)?;
            affine(tape, params, per_frame, &format!("{prefix}.flat_w"), &format!("{prefix}.flat_b"))
        }
        SpatialKind::Gin => {
            let ops = graph.unwrap();
            let x0 = tape.input(
                Array2::from_shape_vec((t * n, f), flat).expect("contiguous reshape"),
            );
            let mut x = x0;
            for i in 0..cfg.layer_count {
                let base = format!("{prefix}.l{i}");
                let neighbors = tape.block_matmul_const(ops.raw.clone(), x)?;
                let self_term = if cfg.epsilon_learnable {
                    let eps_name = format!("{base}.eps");
                    let eps = tape.param(&eps_name, params.get(&eps_name)?.clone());
                    let one_plus = tape.add_scalar(eps, 1.0);
                    let col = tape.broadcast_rows(one_plus, t * n)?;
                    let grid = tape.broadcast_cols(col, tape.value(x).ncols())?;
                    tape.mul(x, grid)?
                } else {
                    x
                };
                let agg = tape.add(self_term, neighbors)?;
                let h1 = affine(tape, params, agg, &format!("{base}.w1"), &format!("{base}.b1"))?;
                let h1 = tape.relu(h1);
                let h2 = affine(tape, params, h1, &format!("{base}.w2"), &format!("{base}.b2"))?;
                x = cfg.activation.apply(tape, h2);
            }
            let per_frame = tape.reshape(x, t, n * cfg.hidden_dim)?;
            affine(tape, params, per_frame, &format!("{prefix}.flat_w"), &format!("{prefix}.flat_b"))
        }
        SpatialKind::Gat => {
            let ops = graph.unwrap();
            let mask = ops.attention_mask.clone();
            let head_dim = cfg.hidden_dim / cfg.attention_heads;
            let stacked = tape.input(
                Array2::from_shape_vec((t * n, f), flat).expect("contiguous reshape"),
            );
            // Attention is frame-local, so process each frame's node set
            // separately and restack for the flatten map.
            let mut frame_rows: Vec<NodeId> = Vec::with_capacity(t);
            for frame_idx in 0..t {
                let mut x = tape.slice_rows(stacked, frame_idx * n, (frame_idx + 1) * n)?;
                for i in 0..cfg.layer_count {
                    let mut heads: Vec<NodeId> = Vec::with_capacity(cfg.attention_heads);
                    for h in 0..cfg.attention_heads {
                        let base = format!("{prefix}.l{i}.h{h}");
                        let w_name = format!("{base}.w");
                        let w = tape.param(&w_name, params.get(&w_name)?.clone());
                        let hx = tape.matmul(x, w)?;
                        let src_name = format!("{base}.a_src");
                        let a_src = tape.param(&src_name, params.get(&src_name)?.clone());
                        let dst_name = format!("{base}.a_dst");
                        let a_dst = tape.param(&dst_name, params.get(&dst_name)?.clone());
                        let s = tape.matmul(hx, a_src)?;
                        let d = tape.matmul(hx, a_dst)?;
                        let s_grid = tape.broadcast_cols(s, n)?;
                        let d_row = tape.transpose(d);
                        let d_grid = tape.broadcast_rows(d_row, n)?;
                        let scores = tape.add(s_grid, d_grid)?;
                        let scores = tape.leaky_relu(scores, ATTENTION_LEAK);
                        let attn = tape.softmax_rows_masked(scores, mask.clone())?;
                        let ctx = tape.matmul(attn, hx)?;
                        heads.push(ctx);
                        let _ = head_dim;
                    }
                    let joined = tape.concat_cols(&heads)?;
                    let bias_name = format!("{prefix}.l{i}.bias");
                    let bias = tape.param(&bias_name, params.get(&bias_name)?.clone());
                    let biased = tape.add_row_vec(joined, bias)?;
                    x = cfg.activation.apply(tape, biased);
                }
                frame_rows.push(tape.reshape(x, 1, n * cfg.hidden_dim)?);
            }
            let per_frame = tape.concat_rows(&frame_rows)?;
            affine(tape, params, per_frame, &format!("{prefix}.flat_w"), &format!("{prefix}.flat_b"))
        }
    }
}

/// Shared transformer-stack settings for the temporal and text paths.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalEncoderConfig {
    pub model_dim: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub feedforward_dim: usize,
    pub max_sequence_length: usize,
    pub positional_encoding: PositionalEncoding,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionalEncoding {
    Sinusoidal,
}

impl TemporalEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0
            || self.layer_count == 0
            || self.head_count == 0
            || self.feedforward_dim == 0
            || self.max_sequence_length == 0
        {
            return Err(Error::validation(
                "temporal encoder dimensions must be positive".to_string(),
            ));
        }
        if self.model_dim % self.head_count != 0 {
            return Err(Error::validation(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.head_count
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::validation(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderConfig {
    pub vocabulary_size: usize,
    pub token_embedding_dim: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub max_tokens: usize,
    pub pooling: Pooling,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Mean,
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocabulary_size == 0
            || self.token_embedding_dim == 0
            || self.layer_count == 0
            || self.head_count == 0
            || self.max_tokens == 0
        {
            return Err(Error::validation(
                "text encoder dimensions must be positive".to_string(),
            ));
        }
        if self.token_embedding_dim % self.head_count != 0 {
            return Err(Error::validation(format!(
                "token_embedding_dim {} not divisible by {} heads",
                self.token_embedding_dim, self.head_count
            )));
        }
        Ok(())
    }

    /// The stack the text branch runs after embedding lookup. The
    /// feedforward width is fixed at twice the embedding dim.
    pub fn stack(&self) -> TemporalEncoderConfig {
        TemporalEncoderConfig {
            model_dim: self.token_embedding_dim,
            layer_count: self.layer_count,
            head_count: self.head_count,
            feedforward_dim: 2 * self.token_embedding_dim,
            max_sequence_length: self.max_tokens,
            positional_encoding: PositionalEncoding::Sinusoidal,
            dropout_rate: self.dropout_rate,
        }
    }
}

/// Deterministic sinusoidal position table `[t, d]`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let rate = 1.0 / 10_000f64.powf(2.0 * pair / d as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Create transformer-stack parameters under `prefix`. `input_dim` enables
/// the learned input projection; pass `None` when the caller feeds
/// already-`model_dim` rows (the text path after embedding).
pub fn init_transformer_params(
    params: &mut ParameterSet,
    prefix: &str,
    cfg: &TemporalEncoderConfig,
    input_dim: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.model_dim;
    if let Some(d_in) = input_dim {
        params.insert(&format!("{prefix}.in_w"), xavier_uniform(d_in, d, rng))?;
        params.insert(&format!("{prefix}.in_b"), Array2::zeros((1, d)))?;
    }
    for l in 0..cfg.layer_count {
        let base = format!("{prefix}.l{l}");
        params.insert(&format!("{base}.ln1_g"), Array2::ones((1, d)))?;
        params.insert(&format!("{base}.ln1_b"), Array2::zeros((1, d)))?;
        for name in ["wq", "wk", "wv", "wo"] {
            params.insert(&format!("{base}.{name}"), xavier_uniform(d, d, rng))?;
        }
        for name in ["bq", "bk", "bv", "bo"] {
            params.insert(&format!("{base}.{name}"), Array2::zeros((1, d)))?;
        }
        params.insert(&format!("{base}.ln2_g"), Array2::ones((1, d)))?;
        params.insert(&format!("{base}.ln2_b"), Array2::zeros((1, d)))?;
        params.insert(&format!("{base}.ffn_w1"), xavier_uniform(d, cfg.feedforward_dim, rng))?;
        params.insert(&format!("{base}.ffn_b1"), Array2::zeros((1, cfg.feedforward_dim)))?;
        params.insert(&format!("{base}.ffn_w2"), xavier_uniform(cfg.feedforward_dim, d, rng))?;
        params.insert(&format!("{base}.ffn_b2"), Array2::zeros((1, d)))?;
    }
    Ok(())
}

/// Pre-norm transformer blocks over `x: [T, model_dim]`. Attention keys are
/// masked to the first `valid_len` positions; there is no final norm, so a
/// block whose attention values and feedforward weights are zero passes its
/// input through untouched.
pub fn transformer_blocks(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    x: NodeId,
    valid_len: usize,
    cfg: &TemporalEncoderConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    cfg.validate()?;
    let t = tape.value(x).nrows();
    let d = cfg.model_dim;
    if tape.value(x).ncols() != d {
        return Err(Error::validation(format!(
            "transformer input width {} != model_dim {d}",
            tape.value(x).ncols()
        )));
    }
    if valid_len == 0 || valid_len > t {
        return Err(Error::validation(format!(
            "valid_len {valid_len} out of range for {t} rows"
        )));
    }
    let head_dim = d / cfg.head_count;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let key_mask = Rc::new(Array2::from_shape_fn((t, t), |(_, j)| j < valid_len));
    let mut dropout_rng = dropout_rng;
    let mut x = x;
    for l in 0..cfg.layer_count {
        let base = format!("{prefix}.l{l}");
        let ln1_g = tape.param(&format!("{base}.ln1_g"), params.get(&format!("{base}.ln1_g"))?.clone());
        let ln1_b = tape.param(&format!("{base}.ln1_b"), params.get(&format!("{base}.ln1_b"))?.clone());
        let normed = tape.layer_norm(x, ln1_g, ln1_b, LAYER_NORM_EPS)?;
        let q = affine(tape, params, normed, &format!("{base}.wq"), &format!("{base}.bq"))?;
        let k = affine(tape, params, normed, &format!("{base}.wk"), &format!("{base}.bk"))?;
        let v = affine(tape, params, normed, &format!("{base}.wv"), &format!("{base}.bv"))?;
        let mut heads = Vec::with_capacity(cfg.head_count);
        for h in 0..cfg.head_count {
            let lo = h * head_dim;
            let hi = lo + head_dim;
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let kt = tape.transpose(kh);
            let raw = tape.matmul(qh, kt)?;
            let scaled = tape.scale(raw, scale);
            let attn = tape.softmax_rows_masked(scaled, key_mask.clone())?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let attn_out = affine(tape, params, ctx, &format!("{base}.wo"), &format!("{base}.bo"))?;
        x = tape.add(x, attn_out)?;

        let ln2_g = tape.param(&format!("{base}.ln2_g"), params.get(&format!("{base}.ln2_g"))?.clone());
        let ln2_b = tape.param(&format!("{base}.ln2_b"), params.get(&format!("{base}.ln2_b"))?.clone());
        let normed2 = tape.layer_norm(x, ln2_g, ln2_b, LAYER_NORM_EPS)?;
        let h1 = affine(tape, params, normed2, &format!("{base}.ffn_w1"), &format!("{base}.ffn_b1"))?;
        let mut h1 = tape.relu(h1);
        if cfg.dropout_rate > 0.0 {
            if let Some(rng) = dropout_rng.as_deref_mut() {
                let keep = 1.0 - cfg.dropout_rate;
                let shape = tape.value(h1).raw_dim();
                let mask = Array2::from_shape_fn(shape, |_| {
                    if rng.gen_range(0.0..1.0) < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                let mask_node = tape.input(mask);
                h1 = tape.mul(h1, mask_node)?;
            }
        }
        let ffn = affine(tape, params, h1, &format!("{base}.ffn_w2"), &format!("{base}.ffn_b2"))?;
        x = tape.add(x, ffn)?;
    }
    Ok(x)
}

/// Encode a `[T, d_in]` sequence to a pooled `[1, model_dim]` vector:
/// learned input projection, sinusoidal positions, transformer blocks,
/// mean over the first `valid_len` rows.
pub fn temporal_encode(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    sequence: &Array2<f64>,
    valid_len: usize,
    cfg: &TemporalEncoderConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let encoded = temporal_encode_sequence(tape, params, prefix, sequence, valid_len, cfg, dropout_rng)?;
    tape.mean_rows_valid(encoded, valid_len)
}

/// As [`temporal_encode`] but returning the full `[T, model_dim]` encoding
/// before pooling.
pub fn temporal_encode_sequence(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    sequence: &Array2<f64>,
    valid_len: usize,
    cfg: &TemporalEncoderConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    cfg.validate()?;
    let t = sequence.nrows();
    if t == 0 {
        return Err(Error::validation("empty sequence".to_string()));
    }
    if t > cfg.max_sequence_length {
        return Err(Error::validation(format!(
            "sequence length {t} exceeds max {}",
            cfg.max_sequence_length
        )));
    }
    let x = tape.input(sequence.clone());
    let projected = affine(tape, params, x, &format!("{prefix}.in_w"), &format!("{prefix}.in_b"))?;
    let pe = tape.input(sinusoidal_positions(t, cfg.model_dim));
    let with_pos = tape.add(projected, pe)?;
    transformer_blocks(tape, params, prefix, with_pos, valid_len, cfg, dropout_rng)
}

/// Same encoding path as [`temporal_encode`] but over a node already on
/// the tape (used by graph-spatial outputs feeding the temporal stack).
pub fn temporal_encode_node(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    sequence: NodeId,
    valid_len: usize,
    cfg: &TemporalEncoderConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    cfg.validate()?;
    let t = tape.value(sequence).nrows();
    if t > cfg.max_sequence_length {
        return Err(Error::validation(format!(
            "sequence length {t} exceeds max {}",
            cfg.max_sequence_length
        )));
    }
    let projected = affine(tape, params, sequence, &format!("{prefix}.in_w"), &format!("{prefix}.in_b"))?;
    let pe = tape.input(sinusoidal_positions(t, cfg.model_dim));
    let with_pos = tape.add(projected, pe)?;
    let encoded = transformer_blocks(tape, params, prefix, with_pos, valid_len, cfg, dropout_rng)?;
    tape.mean_rows_valid(encoded, valid_len)
}

/// Create the text branch parameters: embedding table plus its stack.
pub fn init_text_params(
    params: &mut ParameterSet,
    prefix: &str,
    cfg: &TextEncoderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    params.insert(
        &format!("{prefix}.table"),
        xavier_uniform(cfg.vocabulary_size, cfg.token_embedding_dim, rng),
    )?;
    init_transformer_params(params, prefix, &cfg.stack(), None, rng)
}

/// Embed, position-encode, transform, and mean-pool a token list into a
/// `[1, token_embedding_dim]` vector. Token lists longer than `max_tokens`
/// are truncated; out-of-vocabulary ids are an error.
pub fn text_encode(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    tokens: &[usize],
    cfg: &TextEncoderConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    if tokens.is_empty() {
        return Err(Error::validation("empty token list".to_string()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocabulary_size) {
        return Err(Error::validation(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocabulary_size
        )));
    }
    let kept: Vec<usize> = tokens.iter().copied().take(cfg.max_tokens).collect();
    let table_name = format!("{prefix}.table");
    let table = tape.param(&table_name, params.get(&table_name)?.clone());
    let embedded = tape.embed_rows(table, Rc::new(kept.clone()))?;
    let pe = tape.input(sinusoidal_positions(kept.len(), cfg.token_embedding_dim));
    let with_pos = tape.add(embedded, pe)?;
    let encoded = transformer_blocks(tape, params, prefix, with_pos, kept.len(), &cfg.stack(), None)?;
    tape.mean_rows_valid(encoded, kept.len())
}
