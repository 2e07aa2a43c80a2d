//! The class tree: parsing, parent enumeration and label validation.
//!
//! File format: a JSON object `{"name": string, "children": [ ... ]}` nested
//! recursively. Leaves have an absent or empty `children` list. Child order is
//! significant: it fixes the logit order of every prototype layer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{HpnetError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
pub struct ClassNode {
    pub name: String,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub depth: usize,
}

/// A label as the list of class names from a child of the root down to a leaf.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HierarchicalLabel {
    pub path: Vec<String>,
}

impl HierarchicalLabel {
    pub fn new<S: Into<String>>(path: impl IntoIterator<Item = S>) -> Self {
        HierarchicalLabel {
            path: path.into_iter().map(Into::into).collect(),
        }
    }

    pub fn leaf(&self) -> Option<&str> {
        self.path.last().map(String::as_str)
    }

    pub fn coarse(&self) -> Option<&str> {
        self.path.first().map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum LabelError {
    #[error("empty label path")]
    Empty,
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("invalid edge {parent} -> {child}")]
    InvalidEdge { parent: String, child: String },
    #[error("label ends at internal node `{0}`; labels must end at a leaf")]
    NotALeaf(String),
}

#[derive(Deserialize)]
struct RawNode {
    name: String,
    #[serde(default)]
    children: Vec<RawNode>,
}

#[derive(Serialize)]
struct CanonicalNode<'a> {
    name: &'a str,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    children: Vec<CanonicalNode<'a>>,
}

#[derive(Clone, Debug)]
pub struct Taxonomy {
    nodes: Vec<ClassNode>,
    by_name: HashMap<String, NodeId>,
    parents: Vec<NodeId>,
    leaves: Vec<NodeId>,
}

impl PartialEq for Taxonomy {
    fn eq(&self, other: &Self) -> bool {
        self.canonical_json() == other.canonical_json()
    }
}

/// 1-based line of the `occurrence`-th `"name": "<name>"` pair in `text`.
fn line_of_name(text: &str, name: &str, occurrence: usize) -> usize {
    let quoted = serde_json::to_string(name).unwrap_or_default();
    let mut seen = 0;
    let mut search_from = 0;
    while let Some(rel) = text[search_from..].find(&quoted) {
        let at = search_from + rel;
        let before = text[..at].trim_end();
        if before.ends_with(':') && before[..before.len() - 1].trim_end().ends_with("\"name\"") {
            seen += 1;
            if seen == occurrence {
                return text[..at].matches('\n').count() + 1;
            }
        }
        search_from = at + quoted.len();
    }
    1
}

impl Taxonomy {
    /// Parses the JSON taxonomy format; errors carry a 1-based line number.
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawNode = serde_json::from_str(text).map_err(|e| HpnetError::TaxonomyParse {
            line: e.line().max(1),
            message: e.to_string(),
        })?;
        if raw.children.is_empty() {
            return Err(HpnetError::TaxonomyParse {
                line: line_of_name(text, &raw.name, 1),
                message: format!("root `{}` has no children", raw.name),
            });
        }
        let mut tax = Taxonomy {
            nodes: Vec::new(),
            by_name: HashMap::new(),
            parents: Vec::new(),
            leaves: Vec::new(),
        };
        tax.insert(&raw, None, 0, text)?;
        Ok(tax)
    }

    fn insert(
        &mut self,
        raw: &RawNode,
        parent: Option<NodeId>,
        depth: usize,
        text: &str,
    ) -> Result<NodeId> {
        if raw.name.trim().is_empty() {
            return Err(HpnetError::TaxonomyParse {
                line: 1,
                message: "class names must be non-empty".into(),
            });
        }
        if self.by_name.contains_key(&raw.name) {
            return Err(HpnetError::TaxonomyParse {
                line: line_of_name(text, &raw.name, 2),
                message: format!("duplicate class name `{}`", raw.name),
            });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(ClassNode {
            name: raw.name.clone(),
            parent,
            children: Vec::new(),
            depth,
        });
        self.by_name.insert(raw.name.clone(), id);
        if raw.children.is_empty() {
            self.leaves.push(id);
        } else {
            self.parents.push(id);
            for child in &raw.children {
                let c = self.insert(child, Some(id), depth + 1, text)?;
                self.nodes[id.0].children.push(c);
            }
        }
        Ok(id)
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn node(&self, id: NodeId) -> &ClassNode {
        &self.nodes[id.0]
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id.0].name
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].children
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id.0].parent
    }

    pub fn depth(&self, id: NodeId) -> usize {
        self.nodes[id.0].depth
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id.0].children.is_empty()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    /// Internal nodes in depth-first order, root first.
    pub fn parents(&self) -> &[NodeId] {
        &self.parents
    }

    /// Leaves in depth-first order; the index order of fine distributions.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    /// Position of an internal node in [`Taxonomy::parents`].
    pub fn parent_index(&self, id: NodeId) -> Option<usize> {
        self.parents.iter().position(|&p| p == id)
    }

    pub fn leaf_index(&self, id: NodeId) -> Option<usize> {
        self.leaves.iter().position(|&p| p == id)
    }

    pub fn child_index(&self, parent: NodeId, child: NodeId) -> Option<usize> {
        self.children(parent).iter().position(|&c| c == child)
    }

    /// Nodes from a child of the root down to `id` (root excluded).
    pub fn path_to(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = Vec::new();
        let mut cur = id;
        while let Some(p) = self.parent(cur) {
            path.push(cur);
            cur = p;
        }
        path.reverse();
        path
    }

    /// `(parent, child index)` for every edge on the root-to-`id` path.
    pub fn path_edges(&self, id: NodeId) -> Vec<(NodeId, usize)> {
        let mut edges = Vec::new();
        let mut prev = self.root();
        for node in self.path_to(id) {
            edges.push((prev, self.child_index(prev, node).expect("tree edge")));
            prev = node;
        }
        edges
    }

    pub fn label_for(&self, leaf: NodeId) -> HierarchicalLabel {
        HierarchicalLabel::new(self.path_to(leaf).into_iter().map(|n| self.name(n)))
    }

    /// Ancestor of `id` at depth 1 (the coarse class); `id` itself when shallow.
    pub fn coarse_of(&self, id: NodeId) -> NodeId {
        self.path_to(id).first().copied().unwrap_or(id)
    }

    /// Nodes at depth `k`, plus shallower leaves that stand in for themselves.
    pub fn level(&self, k: usize) -> Vec<NodeId> {
        let mut out = Vec::new();
        self.collect_level(self.root(), k, &mut out);
        out
    }

    fn collect_level(&self, id: NodeId, k: usize, out: &mut Vec<NodeId>) {
        if self.depth(id) == k || (self.is_leaf(id) && self.depth(id) < k) {
            out.push(id);
            return;
        }
        for &c in self.children(id) {
            self.collect_level(c, k, out);
        }
    }

    /// Accepts iff `label` follows tree edges from the root and ends at a leaf.
    pub fn validate_label(&self, label: &HierarchicalLabel) -> Result<Vec<NodeId>, LabelError> {
        self.validate_prefix(label)?;
        let nodes: Vec<NodeId> = label.path.iter().map(|n| self.by_name[n]).collect();
        let last = *nodes.last().expect("non-empty");
        if !self.is_leaf(last) {
            return Err(LabelError::NotALeaf(self.name(last).to_string()));
        }
        Ok(nodes)
    }

    /// Like [`Taxonomy::validate_label`] but without requiring a leaf ending.
    pub fn validate_prefix(&self, label: &HierarchicalLabel) -> Result<Vec<NodeId>, LabelError> {
        if label.path.is_empty() {
            return Err(LabelError::Empty);
        }
        let mut prev = self.root();
        let mut nodes = Vec::with_capacity(label.path.len());
        for name in &label.path {
            let edge_err = || LabelError::InvalidEdge {
                parent: self.name(prev).to_string(),
                child: name.clone(),
            };
            let id = self
                .find(name)
                .filter(|&id| self.parent(id) == Some(prev))
                .ok_or_else(edge_err)?;
            nodes.push(id);
            prev = id;
        }
        Ok(nodes)
    }

    /// Every root-to-leaf label, in leaf order.
    pub fn all_labels(&self) -> Vec<HierarchicalLabel> {
        self.leaves.iter().map(|&l| self.label_for(l)).collect()
    }

    /// Normalized JSON (no whitespace, empty child lists dropped), used for hashing.
    pub fn canonical_json(&self) -> String {
        fn build(t: &Taxonomy, id: NodeId) -> CanonicalNode<'_> {
            CanonicalNode {
                name: t.name(id),
                children: t.children(id).iter().map(|&c| build(t, c)).collect(),
            }
        }
        serde_json::to_string(&build(self, self.root())).expect("serializable")
    }
}
