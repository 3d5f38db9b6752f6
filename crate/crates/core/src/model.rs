//! Run manifest, network hierarchy and the validation matrix.
//!
//! The hierarchy is a tree `model → conv_module → bottleneck → layer`. Only
//! `layer` nodes carry weights; every other node aggregates the contiguous
//! run of layers beneath it, which is what makes hierarchical statistics a
//! plain concatenation over a slice of leaves.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Iterations between dumps used when a manifest does not say otherwise.
pub const DEFAULT_DUMP_INTERVAL: u64 = 1600;

/// Marker for a dump that carried no predicted label for an image.
pub const NO_LABEL: u16 = u16::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Model,
    ConvModule,
    Bottleneck,
    Layer,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Model => "model",
            NodeKind::ConvModule => "conv_module",
            NodeKind::Bottleneck => "bottleneck",
            NodeKind::Layer => "layer",
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(NodeKind::Model),
            "conv_module" => Ok(NodeKind::ConvModule),
            "bottleneck" => Ok(NodeKind::Bottleneck),
            "layer" => Ok(NodeKind::Layer),
            other => Err(Error::InvalidParameter(format!("unknown node kind `{other}`"))),
        }
    }
}

/// One node of the network as written in `manifest.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<NodeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_per_filter: Option<u32>,
}

impl NodeSpec {
    pub fn group(id: impl Into<String>, kind: NodeKind, children: Vec<NodeSpec>) -> Self {
        NodeSpec {
            id: id.into(),
            kind,
            children,
            filter_count: None,
            weights_per_filter: None,
        }
    }

    pub fn layer(id: impl Into<String>, filter_count: u32, weights_per_filter: u32) -> Self {
        NodeSpec {
            id: id.into(),
            kind: NodeKind::Layer,
            children: Vec::new(),
            filter_count: Some(filter_count),
            weights_per_filter: Some(weights_per_filter),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub id: u32,
    pub class_id: u32,
    pub uri: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub dump_interval: u64,
    pub dump_iterations: Vec<u64>,
    pub network: NodeSpec,
    pub classes: Vec<ClassSpec>,
    pub images: Vec<ImageMeta>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let manifest: RunManifest = serde_json::from_str(&text).map_err(Error::json(path))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(Error::json(path))?;
        std::fs::write(path, text).map_err(Error::io(path))
    }

    /// Checks the manifest-level invariants. Class and image ids must be
    /// dense and in manifest order so that bit `i` of a validation bitmap is
    /// image `i`.
    pub fn validate(&self) -> Result<()> {
        if self.dump_interval == 0 {
            return Err(Error::InvalidManifest("dump_interval must be positive".into()));
        }
        for pair in self.dump_iterations.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::NonMonotonic(pair[1]));
            }
        }
        for (i, class) in self.classes.iter().enumerate() {
            if class.id as usize != i {
                return Err(Error::InvalidManifest(format!(
                    "class ids must be dense in manifest order: position {i} has id {}",
                    class.id
                )));
            }
        }
        let mut class_sizes = vec![0usize; self.classes.len()];
        for (i, image) in self.images.iter().enumerate() {
            if image.id as usize != i {
                return Err(Error::InvalidManifest(format!(
                    "image ids must be dense in manifest order: position {i} has id {}",
                    image.id
                )));
            }
            match class_sizes.get_mut(image.class_id as usize) {
                Some(n) => *n += 1,
                None => {
                    return Err(Error::InvalidManifest(format!(
                        "image {} refers to unknown class {}",
                        image.id, image.class_id
                    )))
                }
            }
        }
        if let Some(empty) = class_sizes.iter().position(|&n| n == 0) {
            return Err(Error::InvalidManifest(format!("class {empty} has no images")));
        }
        Ok(())
    }

    pub fn class_images(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.classes.len()];
        for image in &self.images {
            out[image.class_id as usize].push(image.id);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub filter_count: u32,
    pub weights_per_filter: u32,
}

impl LayerShape {
    pub fn weight_count(&self) -> usize {
        self.filter_count as usize * self.weights_per_filter as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub depth: usize,
    /// Present only on `layer` nodes.
    pub shape: Option<LayerShape>,
    /// Positions (into [`NetworkHierarchy::layers`]) of all descendant layers.
    pub layer_range: Range<usize>,
}

/// Arena form of the network tree; nodes are stored in pre-order so leaf
/// order is the network's front-to-back order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkHierarchy {
    nodes: Vec<Node>,
    index: HashMap<String, usize>,
    layers: Vec<usize>,
}

pub fn build_hierarchy(manifest: &RunManifest) -> Result<NetworkHierarchy> {
    NetworkHierarchy::from_spec(&manifest.network)
}

impl NetworkHierarchy {
    pub fn from_spec(root: &NodeSpec) -> Result<Self> {
        if root.kind != NodeKind::Model {
            return Err(Error::InvalidManifest(format!(
                "root node `{}` must be of kind model, found {}",
                root.id, root.kind
            )));
        }
        let mut h = NetworkHierarchy {
            nodes: Vec::new(),
            index: HashMap::new(),
            layers: Vec::new(),
        };
        h.insert(root, None, 0)?;
        if h.layers.is_empty() {
            return Err(Error::InvalidManifest("network has no layers".into()));
        }
        Ok(h)
    }

    fn insert(&mut self, spec: &NodeSpec, parent: Option<usize>, depth: usize) -> Result<usize> {
        if parent.is_some() && spec.kind == NodeKind::Model {
            return Err(Error::InvalidManifest(format!(
                "node `{}`: only the root may be of kind model",
                spec.id
            )));
        }
        if self.index.contains_key(&spec.id) {
            return Err(Error::DuplicateNodeId(spec.id.clone()));
        }
        let shape = match spec.kind {
            NodeKind::Layer => {
                if !spec.children.is_empty() {
                    return Err(Error::InvalidManifest(format!(
                        "layer `{}` must not have children",
                        spec.id
                    )));
                }
                let filter_count = spec.filter_count.unwrap_or(0);
                if filter_count == 0 {
                    return Err(Error::EmptyLayer(spec.id.clone()));
                }
                let weights_per_filter = match spec.weights_per_filter {
                    Some(w) if w > 0 => w,
                    _ => {
                        return Err(Error::InvalidManifest(format!(
                            "layer `{}` needs a positive weights_per_filter",
                            spec.id
                        )))
                    }
                };
                Some(LayerShape {
                    filter_count,
                    weights_per_filter,
                })
            }
            _ => {
                if spec.filter_count.is_some() || spec.weights_per_filter.is_some() {
                    return Err(Error::InvalidManifest(format!(
                        "only layer nodes carry filter_count (node `{}` is {})",
                        spec.id, spec.kind
                    )));
                }
                None
            }
        };

        let idx = self.nodes.len();
        let first_layer = self.layers.len();
        self.index.insert(spec.id.clone(), idx);
        self.nodes.push(Node {
            id: spec.id.clone(),
            kind: spec.kind,
            parent,
            children: Vec::new(),
            depth,
            shape,
            layer_range: first_layer..first_layer,
        });
        if shape.is_some() {
            self.layers.push(idx);
        }
        for child in &spec.children {
            let c = self.insert(child, Some(idx), depth + 1)?;
            self.nodes[idx].children.push(c);
        }
        self.nodes[idx].layer_range = first_layer..self.layers.len();
        Ok(idx)
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> &Node {
        &self.nodes[idx]
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Result<&Node> {
        self.node_index(id)
            .map(|i| &self.nodes[i])
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    /// Node indices of all layers, front to back.
    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, position: usize) -> &Node {
        &self.nodes[self.layers[position]]
    }

    /// Position of a layer id in front-to-back order.
    pub fn layer_position(&self, id: &str) -> Result<usize> {
        let node = self
            .node_index(id)
            .filter(|&i| self.nodes[i].kind == NodeKind::Layer)
            .ok_or_else(|| Error::UnknownLayer(id.to_string()))?;
        Ok(self.nodes[node].layer_range.start)
    }

    pub fn layer_shapes(&self) -> impl Iterator<Item = (&str, LayerShape)> + '_ {
        self.layers.iter().map(|&i| {
            let n = &self.nodes[i];
            (n.id.as_str(), n.shape.expect("layer nodes carry a shape"))
        })
    }

    pub fn total_filters(&self) -> usize {
        self.layer_shapes().map(|(_, s)| s.filter_count as usize).sum()
    }

    pub fn total_weights(&self) -> usize {
        self.layer_shapes().map(|(_, s)| s.weight_count()).sum()
    }

    /// Height of the tree counted in levels (a lone root is depth 1).
    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth + 1).max().unwrap_or(0)
    }

    /// Ids of every node of `kind`, front to back.
    pub fn level_slice(&self, kind: NodeKind) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.kind == kind)
            .map(|n| n.id.as_str())
            .collect()
    }

    /// The coarsest non-root level present, which is what a layer view
    /// shows before any drill-down.
    pub fn top_level_kind(&self) -> NodeKind {
        [NodeKind::ConvModule, NodeKind::Bottleneck]
            .into_iter()
            .find(|&k| self.nodes.iter().any(|n| n.kind == k))
            .unwrap_or(NodeKind::Layer)
    }
}

pub fn level_slice(h: &NetworkHierarchy, kind: NodeKind) -> Vec<String> {
    h.level_slice(kind).into_iter().map(str::to_string).collect()
}

/// Per-image correctness sequences over the dumped iterations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationMatrix {
    dump_count: usize,
    class_images: Vec<Vec<u32>>,
    image_class: Vec<u32>,
    sequences: Vec<Vec<bool>>,
    labels: Option<Vec<Vec<u16>>>,
}

impl ValidationMatrix {
    /// `sequences[image]` holds one bit per dump. `labels`, when present,
    /// holds one predicted class per image per dump ([`NO_LABEL`] if absent).
    pub fn new(
        manifest: &RunManifest,
        dump_count: usize,
        sequences: Vec<Vec<bool>>,
        labels: Option<Vec<Vec<u16>>>,
    ) -> Result<Self> {
        if sequences.len() != manifest.images.len() {
            return Err(Error::LengthMismatch {
                left: sequences.len(),
                right: manifest.images.len(),
            });
        }
        if let Some(bad) = sequences.iter().find(|s| s.len() != dump_count) {
            return Err(Error::LengthMismatch {
                left: bad.len(),
                right: dump_count,
            });
        }
        if let Some(labels) = &labels {
            if labels.len() != sequences.len() || labels.iter().any(|l| l.len() != dump_count) {
                return Err(Error::InvalidManifest(
                    "label matrix shape differs from the validation matrix".into(),
                ));
            }
        }
        Ok(ValidationMatrix {
            dump_count,
            class_images: manifest.class_images(),
            image_class: manifest.images.iter().map(|i| i.class_id).collect(),
            sequences,
            labels,
        })
    }

    pub fn dump_count(&self) -> usize {
        self.dump_count
    }

    pub fn class_count(&self) -> usize {
        self.class_images.len()
    }

    pub fn image_count(&self) -> usize {
        self.sequences.len()
    }

    pub fn class_images(&self, class_id: u32) -> Result<&[u32]> {
        self.class_images
            .get(class_id as usize)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownClass(class_id))
    }

    pub fn class_size(&self, class_id: u32) -> Result<usize> {
        self.class_images(class_id).map(<[u32]>::len)
    }

    pub fn image_class(&self, image_id: u32) -> u32 {
        self.image_class[image_id as usize]
    }

    pub fn sequence(&self, image_id: u32) -> &[bool] {
        &self.sequences[image_id as usize]
    }

    pub fn sequences(&self) -> &[Vec<bool>] {
        &self.sequences
    }

    pub fn labels(&self, image_id: u32) -> Option<&[u16]> {
        self.labels.as_ref().map(|l| l[image_id as usize].as_slice())
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }
}

/// Ids of a network spec collected in pre-order; used to detect duplicates
/// before a full build.
pub fn spec_ids(root: &NodeSpec) -> Vec<&str> {
    let mut out = Vec::new();
    let mut stack = vec![root];
    while let Some(n) = stack.pop() {
        out.push(n.id.as_str());
        stack.extend(n.children.iter().rev());
    }
    out
}

pub fn has_unique_ids(root: &NodeSpec) -> bool {
    let ids = spec_ids(root);
    ids.iter().collect::<HashSet<_>>().len() == ids.len()
}

/// ResNet-50 shaped network: `conv1`, four conv modules of 3/4/6/3
/// bottlenecks with three CONV layers each, and a final FC layer whose
/// filters are its output rows. Channel widths are divided by
/// `width_divisor` (1 gives the full-size network).
pub fn resnet50_network(width_divisor: u32, classes: u32) -> NodeSpec {
    let d = width_divisor.max(1);
    let w = |c: u32| (c / d).max(1);
    let mut children = vec![NodeSpec::layer("conv1", w(64), 3 * 7 * 7)];
    let stages = [(3u32, 64u32), (4, 128), (6, 256), (3, 512)];
    let mut in_channels = w(64);
    for (stage, &(blocks, width)) in stages.iter().enumerate() {
        let module_id = format!("conv{}_x", stage + 2);
        let mut bottlenecks = Vec::new();
        for b in 0..blocks {
            let block_id = format!("{module_id}.b{b}");
            let mid = w(width);
            let out = w(width * 4);
            let layers = vec![
                NodeSpec::layer(format!("{block_id}.a"), mid, in_channels),
                NodeSpec::layer(format!("{block_id}.b"), mid, mid * 9),
                NodeSpec::layer(format!("{block_id}.c"), out, mid),
            ];
            in_channels = out;
            bottlenecks.push(NodeSpec::group(block_id, NodeKind::Bottleneck, layers));
        }
        children.push(NodeSpec::group(module_id, NodeKind::ConvModule, bottlenecks));
    }
    children.push(NodeSpec::layer("fc", classes.max(1), in_channels));
    NodeSpec::group("resnet50", NodeKind::Model, children)
}
