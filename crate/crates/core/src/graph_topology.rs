//! Keypoint connectivity and normalized adjacency operators for the
//! graph-based spatial encoders.
//!
//! The crate ships a default topology transcribing OpenPose's published
//! BODY_25, 70-point face, and 21-point-per-hand connectivity. The two
//! hands are deliberately disjoint subgraphs.

use crate::error::{Error, Result};
use ndarray::Array2;
use std::collections::HashSet;
use std::path::Path;

const DEFAULT_TOPOLOGY: &str = include_str!("../assets/openpose_topology.txt");

/// The three anatomical keypoint groups, in stream order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Skeleton,
    Face,
    Hands,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Skeleton, Group::Face, Group::Hands];

    pub fn name(self) -> &'static str {
        match self {
            Group::Skeleton => "skeleton",
            Group::Face => "face",
            Group::Hands => "hands",
        }
    }

    /// Number of keypoints in the group.
    pub fn size(self) -> usize {
        match self {
            Group::Skeleton => 25,
            Group::Face => 70,
            Group::Hands => 42,
        }
    }

    fn from_name(name: &str) -> Option<Group> {
        match name {
            "skeleton" => Some(Group::Skeleton),
            "face" => Some(Group::Face),
            "hands" => Some(Group::Hands),
            _ => None,
        }
    }
}

/// Per-group undirected edge lists over group-local indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub skeleton: Vec<(usize, usize)>,
    pub face: Vec<(usize, usize)>,
    pub hands: Vec<(usize, usize)>,
}

impl Topology {
    pub fn edges(&self, group: Group) -> &[(usize, usize)] {
        match group {
            Group::Skeleton => &self.skeleton,
            Group::Face => &self.face,
            Group::Hands => &self.hands,
        }
    }

    /// The shipped OpenPose connectivity.
    pub fn openpose_default() -> Topology {
        parse_topology(DEFAULT_TOPOLOGY).expect("shipped topology is valid")
    }
}

/// Symmetric degree-normalized adjacency with self-loops:
/// Â = D^{−1/2}(A+I)D^{−1/2}.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub matrix: Array2<f64>,
    pub built_with_self_loops: bool,
}

fn parse_topology(text: &str) -> Result<Topology> {
    let mut topo = Topology {
        skeleton: Vec::new(),
        face: Vec::new(),
        hands: Vec::new(),
    };
    let mut seen: HashSet<(Group, usize, usize)> = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (name, i_str, j_str) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) if parts.next().is_none() => (a, b, c),
            _ => {
                return Err(Error::parse(format!(
                    "topology line {}: expected 'group i j', got '{line}'",
                    lineno + 1
                )))
            }
        };
        let group = Group::from_name(name).ok_or_else(|| {
            Error::parse(format!("topology line {}: unknown group '{name}'", lineno + 1))
        })?;
        let parse_idx = |s: &str| {
            s.parse::<usize>().map_err(|_| {
                Error::parse(format!("topology line {}: bad index '{s}'", lineno + 1))
            })
        };
        let i = parse_idx(i_str)?;
        let j = parse_idx(j_str)?;
        let n = group.size();
        if i >= n || j >= n {
            return Err(Error::validation(format!(
                "edge ({i}, {j}) out of range for group {} (size {n})",
                group.name()
            )));
        }
        if i == j {
            return Err(Error::validation(format!(
                "self-edge ({i}, {j}) in group {}",
                group.name()
            )));
        }
        if group == Group::Hands {
            let left = |k: usize| k < 21;
            if left(i) != left(j) {
                return Err(Error::validation(format!(
                    "edge ({i}, {j}) crosses the left/right hand boundary"
                )));
            }
        }
        let key = (group, i.min(j), i.max(j));
        if !seen.insert(key) {
            return Err(Error::validation(format!(
                "duplicate edge ({i}, {j}) in group {}",
                group.name()
            )));
        }
        match group {
            Group::Skeleton => topo.skeleton.push((i, j)),
            Group::Face => topo.face.push((i, j)),
            Group::Hands => topo.hands.push((i, j)),
        }
    }
    Ok(topo)
}

/// Parse and validate a topology file (`group_name i j` per line, `#`
/// comments). Errors name the offending edge.
pub fn load_topology(path: &Path) -> Result<Topology> {
    let text = std::fs::read_to_string(path)?;
    parse_topology(&text)
}

/// Â = D^{−1/2}(A+I)D^{−1/2} over an explicit node count and edge list.
/// With no edges this is exactly the identity matrix.
pub fn normalized_adjacency_from_edges(n: usize, edges: &[(usize, usize)]) -> Array2<f64> {
    let mut a = Array2::<f64>::eye(n);
    for &(i, j) in edges {
        a[[i, j]] = 1.0;
        a[[j, i]] = 1.0;
    }
    let degrees: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    let mut out = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if a[[i, j]] != 0.0 {
                out[[i, j]] = a[[i, j]] / (degrees[i] * degrees[j]).sqrt();
            }
        }
    }
    out
}

/// Build the normalized operator for one group of a topology.
pub fn build_normalized_adjacency(topology: &Topology, group: Group) -> NormalizedAdjacency {
    NormalizedAdjacency {
        matrix: normalized_adjacency_from_edges(group.size(), topology.edges(group)),
        built_with_self_loops: true,
    }
}

/// Unnormalized adjacency without self-loops (used by the sum-aggregation
/// encoder, which adds its own centered term).
pub fn raw_adjacency(topology: &Topology, group: Group) -> Array2<f64> {
    let n = group.size();
    let mut a = Array2::<f64>::zeros((n, n));
    for &(i, j) in topology.edges(group) {
        a[[i, j]] = 1.0;
        a[[j, i]] = 1.0;
    }
    a
}
