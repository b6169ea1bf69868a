//! Mixtures of compositional trees and the model file.
//!
//! Every non-leaf node composes exactly two children one level below it and
//! stores `delta`, the position of its second child relative to its first.
//! A node sits at the average of its children, so given a root position the
//! whole zero-deformation configuration follows from the deltas.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{json_error, Error, Result};

pub const MODEL_VERSION: u32 = 1;
pub const ORIENTATIONS: u8 = 8;
pub const POLARITIES: u8 = 3;
pub const LEAF_TYPES: usize = (ORIENTATIONS * POLARITIES) as usize;

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartLabel {
    Head,
    Neck,
    Torso,
}

impl PartLabel {
    /// Schema order; also the composition order of part trees.
    pub const ALL: [PartLabel; 3] = [PartLabel::Head, PartLabel::Neck, PartLabel::Torso];

    /// Value used in labeled masks (0 is background).
    pub fn mask_value(self) -> u8 {
        match self {
            PartLabel::Head => 1,
            PartLabel::Neck => 2,
            PartLabel::Torso => 3,
        }
    }

    pub fn from_mask_value(v: u8) -> Option<PartLabel> {
        match v {
            1 => Some(PartLabel::Head),
            2 => Some(PartLabel::Neck),
            3 => Some(PartLabel::Torso),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PartLabel::Head => "head",
            PartLabel::Neck => "neck",
            PartLabel::Torso => "torso",
        }
    }

    pub fn parse(s: &str) -> Option<PartLabel> {
        PartLabel::ALL.into_iter().find(|p| p.name() == s)
    }
}

impl fmt::Display for PartLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Oriented edgelet type of a leaf.
///
/// `orientation` indexes the angles `k * pi / 8`. `polarity` 0 puts the object
/// on the side of the normal `(-sin, cos)` (pixels on the line included),
/// 1 on the opposite side, and 2 on both sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LeafType {
    pub orientation: u8,
    pub polarity: u8,
}

impl LeafType {
    pub fn new(orientation: u8, polarity: u8) -> Result<Self> {
        if orientation >= ORIENTATIONS || polarity >= POLARITIES {
            return Err(Error::invalid(format!(
                "leaf type ({orientation}, {polarity}) out of range"
            )));
        }
        Ok(LeafType {
            orientation,
            polarity,
        })
    }

    pub fn is_valid(&self) -> bool {
        self.orientation < ORIENTATIONS && self.polarity < POLARITIES
    }

    pub fn index(&self) -> usize {
        self.orientation as usize * POLARITIES as usize + self.polarity as usize
    }

    pub fn from_index(i: usize) -> LeafType {
        assert!(i < LEAF_TYPES);
        LeafType {
            orientation: (i / POLARITIES as usize) as u8,
            polarity: (i % POLARITIES as usize) as u8,
        }
    }

    pub fn all() -> impl Iterator<Item = LeafType> {
        (0..LEAF_TYPES).map(LeafType::from_index)
    }

    pub fn angle(&self) -> f64 {
        orientation_angle(self.orientation)
    }
}

pub fn orientation_angle(k: u8) -> f64 {
    k as f64 * PI / ORIENTATIONS as f64
}

/// Nearest orientation bin for a direction angle (radians, any range).
/// Exact ties between two bins go to the lower index.
pub fn quantize_orientation(angle: f64) -> u8 {
    let step = PI / ORIENTATIONS as f64;
    let a = angle.rem_euclid(PI);
    let k = (a / step - 0.5 - 1e-9).ceil() as i64;
    k.rem_euclid(ORIENTATIONS as i64) as u8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CompNode {
    pub id: usize,
    pub level: u32,
    #[serde(default)]
    pub children: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leaf_type: Option<LeafType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part_label: Option<PartLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part_score_channel: Option<usize>,
}

impl CompNode {
    pub fn leaf(id: usize, leaf_type: LeafType) -> Self {
        CompNode {
            id,
            level: 1,
            children: Vec::new(),
            delta: None,
            leaf_type: Some(leaf_type),
            part_label: None,
            part_score_channel: None,
        }
    }

    pub fn composite(id: usize, level: u32, first: usize, second: usize, delta: Point) -> Self {
        CompNode {
            id,
            level,
            children: vec![first, second],
            delta: Some(delta),
            leaf_type: None,
            part_label: None,
            part_score_channel: None,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// One mixture component. Node `i` must carry `id == i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompTree {
    pub nodes: Vec<CompNode>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub node: Option<usize>,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(n) => write!(f, "node {n}: {}", self.rule),
            None => write!(f, "tree: {}", self.rule),
        }
    }
}

impl CompTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: usize) -> &CompNode {
        &self.nodes[id]
    }

    /// Nodes that are nobody's child.
    fn roots(&self) -> Vec<usize> {
        let mut is_child = vec![false; self.nodes.len()];
        for n in &self.nodes {
            for &c in &n.children {
                if c < is_child.len() {
                    is_child[c] = true;
                }
            }
        }
        (0..self.nodes.len()).filter(|&i| !is_child[i]).collect()
    }

    /// Root id. Assumes a valid tree.
    pub fn root(&self) -> usize {
        let roots = self.roots();
        debug_assert_eq!(roots.len(), 1);
        roots[0]
    }

    pub fn levels(&self) -> u32 {
        self.node(self.root()).level
    }

    /// Leaves in depth-first, first-child-first order.
    pub fn leaves(&self) -> Vec<usize> {
        self.pre_order().into_iter().filter(|&i| self.nodes[i].is_leaf()).collect()
    }

    pub fn pre_order(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root()];
        while let Some(i) = stack.pop() {
            out.push(i);
            for &c in self.nodes[i].children.iter().rev() {
                stack.push(c);
            }
        }
        out
    }

    /// Children before parents.
    pub fn post_order(&self) -> Vec<usize> {
        let mut order = self.pre_order();
        order.reverse();
        order
    }

    /// Part label of every node, inherited from the nearest labeled ancestor.
    pub fn inherited_labels(&self) -> Vec<Option<PartLabel>> {
        let mut labels = vec![None; self.nodes.len()];
        for i in self.pre_order() {
            let own = self.nodes[i].part_label;
            let inherited = labels[i];
            let label = own.or(inherited);
            labels[i] = label;
            for &c in &self.nodes[i].children {
                labels[c] = label;
            }
        }
        labels
    }

    /// Leaves grouped by inherited part label, schema order, each group in leaf order.
    pub fn part_leaves(&self) -> Vec<(PartLabel, Vec<usize>)> {
        let labels = self.inherited_labels();
        let leaves = self.leaves();
        PartLabel::ALL
            .into_iter()
            .filter_map(|p| {
                let ls: Vec<usize> = leaves.iter().copied().filter(|&l| labels[l] == Some(p)).collect();
                (!ls.is_empty()).then_some((p, ls))
            })
            .collect()
    }

    /// Structural violations; empty iff the tree is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        fn push(v: &mut Vec<Violation>, node: Option<usize>, rule: String) {
            v.push(Violation { node, rule });
        }
        if self.nodes.is_empty() {
            push(&mut v, None, "tree has no nodes".into());
            return v;
        }
        let n = self.nodes.len();
        let mut parent_count = vec![0usize; n];
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                push(&mut v, Some(i), format!("id {} does not match its position {i}", node.id));
            }
            for &c in &node.children {
                if c >= n {
                    push(&mut v, Some(i), format!("child {c} does not exist"));
                } else {
                    parent_count[c] += 1;
                }
            }
            if node.level == 0 {
                push(&mut v, Some(i), "level must be at least 1".into());
            }
            if node.is_leaf() {
                if node.level != 1 {
                    push(&mut v, Some(i), format!("leaf at level {} (leaves must be at level 1)", node.level));
                }
                match node.leaf_type {
                    None => push(&mut v, Some(i), "leaf without a leaf type".into()),
                    Some(t) if !t.is_valid() => push(&mut v, Some(i), "leaf type out of range".into()),
                    _ => {}
                }
                if node.delta.is_some() {
                    push(&mut v, Some(i), "leaf carries a composition offset".into());
                }
            } else {
                if node.children.len() != 2 {
                    push(&mut v, Some(i),
                        format!("node has {} children (exactly two required)", node.children.len()),
                    );
                }
                if node.level == 1 {
                    push(&mut v, Some(i), "level-1 node has children".into());
                }
                for &c in &node.children {
                    if c < n && self.nodes[c].level + 1 != node.level {
                        push(&mut v, Some(i),
                            format!(
                                "child {c} is at level {} (expected {})",
                                self.nodes[c].level,
                                node.level.saturating_sub(1)
                            ),
                        );
                    }
                }
                match node.delta {
                    None => push(&mut v, Some(i), "composite node without offset".into()),
                    Some(d) if !(d[0].is_finite() && d[1].is_finite()) => {
                        push(&mut v, Some(i), "offset is not finite".into())
                    }
                    _ => {}
                }
                if node.leaf_type.is_some() {
                    push(&mut v, Some(i), "composite node carries a leaf type".into());
                }
            }
        }
        for (i, &c) in parent_count.iter().enumerate() {
            if c > 1 {
                push(&mut v, Some(i), format!("node has {c} parents"));
            }
        }
        let roots = self.roots();
        if roots.len() != 1 {
            push(&mut v, None, format!("expected exactly one root, found {}", roots.len()));
            return v;
        }
        if v.iter().any(|x| x.rule.contains("does not exist") || x.rule.contains("parents")) {
            return v;
        }
        // reachability and the node-count law
        let reached = self.pre_order();
        if reached.len() != n {
            push(&mut v, None, format!("{} nodes unreachable from the root", n - reached.len()));
        }
        let levels = self.nodes[roots[0]].level;
        if (1..32).contains(&levels) {
            let leaves = self.nodes.iter().filter(|x| x.is_leaf()).count();
            if leaves != 1 << (levels - 1) {
                push(&mut v, None, format!("{leaves} leaves for {levels} levels (expected {})", 1u64 << (levels - 1)));
            }
            if n != (1 << levels) - 1 {
                push(&mut v, None, format!("{n} nodes for {levels} levels (expected {})", (1u64 << levels) - 1));
            }
        }
        v
    }

    /// Zero-deformation positions of every node (indexed by id) with the root at `root_pos`.
    pub fn node_positions(&self, root_pos: Point) -> Vec<Point> {
        let mut pos = vec![[0.0; 2]; self.nodes.len()];
        let root = self.root();
        pos[root] = root_pos;
        for i in self.pre_order() {
            let node = &self.nodes[i];
            if let (Some(d), [a, b]) = (node.delta, node.children.as_slice()) {
                let p = pos[i];
                pos[*a] = [p[0] - d[0] / 2.0, p[1] - d[1] / 2.0];
                pos[*b] = [p[0] + d[0] / 2.0, p[1] + d[1] / 2.0];
            }
        }
        pos
    }

    /// Leaf coordinates (in [`CompTree::leaves`] order) of the mean shape rooted at `root_pos`.
    pub fn mean_shape(&self, root_pos: Point) -> Result<Vec<Point>> {
        self.ensure_valid()?;
        let pos = self.node_positions(root_pos);
        Ok(self.leaves().into_iter().map(|l| pos[l]).collect())
    }

    /// Inverse of [`CompTree::mean_shape`]: averages leaf positions upward to the root.
    pub fn recompose(&self, leaf_positions: &[Point]) -> Result<Point> {
        self.ensure_valid()?;
        let leaves = self.leaves();
        if leaves.len() != leaf_positions.len() {
            return Err(Error::DimensionMismatch {
                what: "leaf positions".into(),
                expected: leaves.len(),
                found: leaf_positions.len(),
            });
        }
        let mut pos = vec![[0.0; 2]; self.nodes.len()];
        for (l, p) in leaves.iter().zip(leaf_positions) {
            pos[*l] = *p;
        }
        for i in self.post_order() {
            if let [a, b] = self.nodes[i].children.as_slice() {
                pos[i] = [(pos[*a][0] + pos[*b][0]) / 2.0, (pos[*a][1] + pos[*b][1]) / 2.0];
            }
        }
        Ok(pos[self.root()])
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema {
                what: "compositional tree".into(),
                location: v[0].node.map_or("tree".into(), |n| format!("node {n}")),
                message: v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
            })
        }
    }
}

/// A labeled closed contour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartPolygon {
    pub label: PartLabel,
    pub polygon: Vec<Point>,
}

/// Number of boundary landmarks sampled per part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandmarkCounts {
    pub head: usize,
    pub neck: usize,
    pub torso: usize,
}

impl Default for LandmarkCounts {
    fn default() -> Self {
        LandmarkCounts {
            head: 8,
            neck: 8,
            torso: 16,
        }
    }
}

impl LandmarkCounts {
    pub fn get(&self, part: PartLabel) -> usize {
        match part {
            PartLabel::Head => self.head,
            PartLabel::Neck => self.neck,
            PartLabel::Torso => self.torso,
        }
    }

    pub fn total(&self) -> usize {
        self.head + self.neck + self.torso
    }

    /// Parses `head=8,neck=8,torso=16`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut c = LandmarkCounts {
            head: 0,
            neck: 0,
            torso: 0,
        };
        for item in s.split(',').filter(|t| !t.trim().is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("landmark count `{item}` is not part=count")))?;
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("landmark count `{v}` is not an integer")))?;
            match PartLabel::parse(k.trim()) {
                Some(PartLabel::Head) => c.head = n,
                Some(PartLabel::Neck) => c.neck = n,
                Some(PartLabel::Torso) => c.torso = n,
                None => return Err(Error::invalid(format!("unknown part `{k}`"))),
            }
        }
        Ok(c)
    }
}

/// Shared parameters `(wDef, wPart, wEdge, wApp)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WeightVector {
    pub w_def: [f64; 2],
    pub w_edge: f64,
    pub w_app: Vec<f64>,
    pub w_part: f64,
}

impl WeightVector {
    pub fn zeros(channels: usize) -> Self {
        WeightVector {
            w_def: [0.0; 2],
            w_edge: 0.0,
            w_app: vec![0.0; 2 * channels],
            w_part: 0.0,
        }
    }

    /// Starting point for training: edge-driven with a light deformation prior.
    pub fn initial(channels: usize) -> Self {
        WeightVector {
            w_def: [0.01, 0.01],
            w_edge: -1.0,
            w_app: vec![0.0; 2 * channels],
            w_part: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.w_app.len() / 2
    }

    pub fn dim(&self) -> usize {
        4 + self.w_app.len()
    }

    /// Flat layout `[wDef.x, wDef.y, wEdge, wApp.., wPart]`, matching the feature vector.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.w_def);
        v.push(self.w_edge);
        v.extend_from_slice(&self.w_app);
        v.push(self.w_part);
        v
    }

    pub fn from_vec(v: &[f64]) -> Result<Self> {
        if v.len() < 4 || !v.len().is_multiple_of(2) {
            return Err(Error::invalid(format!("weight vector of length {} has no valid layout", v.len())));
        }
        let n = v.len();
        Ok(WeightVector {
            w_def: [v[0], v[1]],
            w_edge: v[2],
            w_app: v[3..n - 1].to_vec(),
            w_part: v[n - 1],
        })
    }

    pub fn dot(&self, features: &[f64]) -> f64 {
        self.to_vec().iter().zip(features).map(|(a, b)| a * b).sum()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.w_app.len() != 2 * channels {
            return Err(Error::DimensionMismatch {
                what: "wApp".into(),
                expected: 2 * channels,
                found: self.w_app.len(),
            });
        }
        for (name, w) in [("wDef.x", self.w_def[0]), ("wDef.y", self.w_def[1])] {
            if !(w >= 0.0) {
                return Err(Error::NegativeWeight { name, value: w });
            }
        }
        if self.to_vec().iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("weights must be finite"));
        }
        Ok(())
    }
}

/// A mixture of compositional trees sharing leaf types and landmark counts.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    pub grid_size: usize,
    /// Side of the square window used by the appearance feature (odd).
    pub square_side: usize,
    /// Appearance channels `C`.
    pub channels: usize,
    pub landmark_counts: LandmarkCounts,
    pub mixtures: Vec<CompTree>,
}

impl MixtureModel {
    pub fn validate(&self) -> Result<()> {
        let schema = |location: String, message: String| Error::Schema {
            what: "model".into(),
            location,
            message,
        };
        if self.mixtures.is_empty() {
            return Err(schema("mixtures".into(), "at least one mixture is required".into()));
        }
        if self.square_side.is_multiple_of(2) {
            return Err(schema("squareSide".into(), format!("{} is not odd", self.square_side)));
        }
        if self.grid_size == 0 {
            return Err(schema("gridSize".into(), "must be positive".into()));
        }
        for (m, tree) in self.mixtures.iter().enumerate() {
            let v = tree.validate();
            if let Some(first) = v.first() {
                let location = match first.node {
                    Some(n) => format!("mixtures[{m}].nodes[{n}]"),
                    None => format!("mixtures[{m}]"),
                };
                let message = v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
                return Err(schema(location, message));
            }
            if tree.len() != self.mixtures[0].len() {
                return Err(schema(
                    format!("mixtures[{m}]"),
                    format!("{} nodes, mixture 0 has {}", tree.len(), self.mixtures[0].len()),
                ));
            }
            let parts = tree.part_leaves();
            if !parts.is_empty() {
                for p in PartLabel::ALL {
                    let found = parts.iter().find(|(l, _)| *l == p).map_or(0, |(_, ls)| ls.len());
                    if found != self.landmark_counts.get(p) {
                        return Err(schema(
                            format!("mixtures[{m}]"),
                            format!("{found} {p} leaves, landmarkCounts says {}", self.landmark_counts.get(p)),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ModelFile {
    version: u32,
    grid_size: usize,
    square_side: usize,
    channels: usize,
    landmark_counts: LandmarkCounts,
    weights: WeightVector,
    mixtures: Vec<CompTree>,
}

/// Serializes a model and its weights to the JSON model document.
pub fn serialize_model(model: &MixtureModel, weights: &WeightVector) -> Result<String> {
    model.validate()?;
    let file = ModelFile {
        version: MODEL_VERSION,
        grid_size: model.grid_size,
        square_side: model.square_side,
        channels: model.channels,
        landmark_counts: model.landmark_counts,
        weights: weights.clone(),
        mixtures: model.mixtures.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file).map_err(|e| Error::invalid(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Parses and validates a model document.
pub fn deserialize_model(text: &str) -> Result<(MixtureModel, WeightVector)> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| json_error("model", text, e))?;
    if file.version != MODEL_VERSION {
        return Err(Error::Schema {
            what: "model".into(),
            location: "version".into(),
            message: format!("unsupported version {} (expected {MODEL_VERSION})", file.version),
        });
    }
    let model = MixtureModel {
        grid_size: file.grid_size,
        square_side: file.square_side,
        channels: file.channels,
        landmark_counts: file.landmark_counts,
        mixtures: file.mixtures,
    };
    model.validate()?;
    file.weights.validate(model.channels).map_err(|e| Error::Schema {
        what: "model".into(),
        location: "weights".into(),
        message: e.to_string(),
    })?;
    Ok((model, file.weights))
}
