//! The symbolic class hierarchy and its two compact codes.
//!
//! A tree has levels `0..=L`. Every original class is a leaf at level `L`,
//! so each class is a root-to-leaf path with one node per level. Within a
//! level, nodes are indexed in file order; the code for a level stores the
//! node's rank among its siblings, so a level's width is the largest sibling
//! count rather than the number of nodes at that level.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("tree has no levels")]
    Empty,
    #[error("level {level} node {node} has no valid parent")]
    Orphan { level: usize, node: usize },
    #[error("root node {node} declares a parent")]
    RootWithParent { node: usize },
    #[error("node {node} at level {level} has no children but is not at the deepest level")]
    ChildlessInternal { level: usize, node: usize },
    #[error("leaf {leaf} is claimed by more than one class")]
    DuplicateLeaf { leaf: usize },
    #[error("leaf {leaf} has no class")]
    UnmappedLeaf { leaf: usize },
    #[error("class {class} refers to missing leaf {leaf}")]
    LeafOutOfRange { class: u32, leaf: usize },
    #[error("unknown class id {0}")]
    UnknownClass(u32),
    #[error("path has {got} levels, tree has {expected}")]
    PathLevelMismatch { expected: usize, got: usize },
    #[error("level {level} out of range (tree has {levels} levels)")]
    LevelOutOfRange { level: usize, levels: usize },
    #[error("embedding has length {got}, layout expects {expected}")]
    EmbeddingLength { expected: usize, got: usize },
    #[error("tree file: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub name: String,
    #[serde(default)]
    pub parent: Option<usize>,
}

/// On-disk form of a tree. May describe an invalid tree; use
/// [`SemanticTree::from_document`] to validate.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TreeDocument {
    pub levels: Vec<Vec<TreeNode>>,
    /// class id → index of its leaf in the last level
    pub classes: BTreeMap<u32, usize>,
}

impl TreeDocument {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("tree document serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, TreeError> {
        serde_json::from_str(text).map_err(|e| TreeError::Io(e.to_string()))
    }
}

/// A validated hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTree {
    doc: TreeDocument,
    children: Vec<Vec<Vec<usize>>>,
    rank: Vec<Vec<usize>>,
    leaf_class: Vec<u32>,
    paths: BTreeMap<u32, HierPath>,
}

/// Global node index per level, root first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HierPath(pub Vec<usize>);

impl HierPath {
    pub fn levels(&self) -> usize {
        self.0.len()
    }
}

impl SemanticTree {
    pub fn from_document(doc: TreeDocument) -> Result<Self, TreeError> {
        if doc.levels.is_empty() || doc.levels[0].is_empty() {
            return Err(TreeError::Empty);
        }
        let depth = doc.levels.len();
        let mut children: Vec<Vec<Vec<usize>>> = doc
            .levels
            .iter()
            .map(|lvl| vec![Vec::new(); lvl.len()])
            .collect();
        let mut rank: Vec<Vec<usize>> = doc.levels.iter().map(|l| vec![0; l.len()]).collect();

        for (i, node) in doc.levels[0].iter().enumerate() {
            if node.parent.is_some() {
                return Err(TreeError::RootWithParent { node: i });
            }
            rank[0][i] = i;
        }
        for l in 1..depth {
            for (i, node) in doc.levels[l].iter().enumerate() {
                let p = match node.parent {
                    Some(p) if p < doc.levels[l - 1].len() => p,
                    _ => return Err(TreeError::Orphan { level: l, node: i }),
                };
                rank[l][i] = children[l - 1][p].len();
                children[l - 1][p].push(i);
            }
        }
        for l in 0..depth - 1 {
            if let Some(node) = children[l].iter().position(|c| c.is_empty()) {
                return Err(TreeError::ChildlessInternal { level: l, node });
            }
        }

        let leaves = doc.levels[depth - 1].len();
        let mut owner: Vec<Option<u32>> = vec![None; leaves];
        for (&class, &leaf) in &doc.classes {
            if leaf >= leaves {
                return Err(TreeError::LeafOutOfRange { class, leaf });
            }
            if owner[leaf].is_some() {
                return Err(TreeError::DuplicateLeaf { leaf });
            }
            owner[leaf] = Some(class);
        }
        let mut leaf_class = Vec::with_capacity(leaves);
        for (leaf, o) in owner.into_iter().enumerate() {
            match o {
                Some(c) => leaf_class.push(c),
                None => return Err(TreeError::UnmappedLeaf { leaf }),
            }
        }

        let mut paths = BTreeMap::new();
        for (&class, &leaf) in &doc.classes {
            let mut nodes = vec![0; depth];
            nodes[depth - 1] = leaf;
            for l in (1..depth).rev() {
                nodes[l - 1] = doc.levels[l][nodes[l]].parent.expect("validated parent");
            }
            paths.insert(class, HierPath(nodes));
        }

        Ok(Self {
            doc,
            children,
            rank,
            leaf_class,
            paths,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, TreeError> {
        Self::from_document(TreeDocument::from_json(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, TreeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TreeError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Single-level tree: the flat labelling as a degenerate hierarchy.
    pub fn flat(classes: &[(u32, String)]) -> Result<Self, TreeError> {
        let mut sorted: Vec<_> = classes.to_vec();
        sorted.sort_by_key(|(id, _)| *id);
        let level = sorted
            .iter()
            .map(|(_, n)| TreeNode {
                name: n.clone(),
                parent: None,
            })
            .collect();
        let classes = sorted.iter().enumerate().map(|(i, (id, _))| (*id, i)).collect();
        Self::from_document(TreeDocument {
            levels: vec![level],
            classes,
        })
    }

    /// Balanced `branching`-ary tree of `depth` levels over `branching^depth`
    /// classes numbered from 1.
    pub fn balanced(branching: usize, depth: usize) -> Result<Self, TreeError> {
        let mut levels = Vec::with_capacity(depth);
        let mut count = 1usize;
        for l in 0..depth {
            count *= branching;
            let lvl = (0..count)
                .map(|i| TreeNode {
                    name: format!("L{l}N{i}"),
                    parent: if l == 0 { None } else { Some(i / branching) },
                })
                .collect();
            levels.push(lvl);
        }
        let classes = (0..count).map(|i| (i as u32 + 1, i)).collect();
        Self::from_document(TreeDocument { levels, classes })
    }

    pub fn document(&self) -> &TreeDocument {
        &self.doc
    }

    pub fn to_json(&self) -> String {
        self.doc.to_json()
    }

    /// Number of levels, `L + 1`.
    pub fn depth(&self) -> usize {
        self.doc.levels.len()
    }

    pub fn level_len(&self, level: usize) -> usize {
        self.doc.levels[level].len()
    }

    pub fn node(&self, level: usize, index: usize) -> &TreeNode {
        &self.doc.levels[level][index]
    }

    pub fn node_label(&self, level: usize, index: usize) -> &str {
        &self.doc.levels[level][index].name
    }

    pub fn children(&self, level: usize, index: usize) -> &[usize] {
        &self.children[level][index]
    }

    /// Rank of a node among its siblings.
    pub fn sibling_rank(&self, level: usize, index: usize) -> usize {
        self.rank[level][index]
    }

    pub fn class_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.doc.classes.keys().copied()
    }

    pub fn class_count(&self) -> usize {
        self.doc.classes.len()
    }

    /// Position of a class in ascending-id order; the flat label index.
    pub fn flat_index(&self, class_id: u32) -> Option<usize> {
        self.doc.classes.keys().position(|&c| c == class_id)
    }

    pub fn class_at_flat_index(&self, index: usize) -> Option<u32> {
        self.doc.classes.keys().nth(index).copied()
    }

    pub fn class_of_leaf(&self, leaf: usize) -> u32 {
        self.leaf_class[leaf]
    }

    pub fn class_name(&self, class_id: u32) -> Option<&str> {
        let leaf = *self.doc.classes.get(&class_id)?;
        Some(&self.doc.levels[self.depth() - 1][leaf].name)
    }

    pub fn path_of(&self, class_id: u32) -> Result<&HierPath, TreeError> {
        self.paths.get(&class_id).ok_or(TreeError::UnknownClass(class_id))
    }

    /// Number of valid child ranks below `parent` at the previous level, or
    /// the root count at level 0.
    fn choices(&self, level: usize, parent: Option<usize>) -> usize {
        match parent {
            None => self.doc.levels[0].len(),
            Some(p) => self.children[level - 1][p].len(),
        }
    }

    fn node_from_rank(&self, level: usize, parent: Option<usize>, rank: usize) -> usize {
        match parent {
            None => rank,
            Some(p) => self.children[level - 1][p][rank],
        }
    }

    fn check_path(&self, path: &HierPath) -> Result<(), TreeError> {
        if path.levels() != self.depth() {
            return Err(TreeError::PathLevelMismatch {
                expected: self.depth(),
                got: path.levels(),
            });
        }
        Ok(())
    }

    /// The largest sibling count per level.
    pub fn level_widths(&self) -> Vec<usize> {
        (0..self.depth())
            .map(|l| {
                if l == 0 {
                    self.doc.levels[0].len()
                } else {
                    self.children[l - 1].iter().map(Vec::len).max().unwrap_or(1)
                }
            })
            .collect()
    }
}

/// Returns the node index at `level` from a decoded per-level node list.
pub fn level_label(tree: &SemanticTree, nodes: &[usize], level: usize) -> Result<usize, TreeError> {
    if level >= tree.depth() || level >= nodes.len() {
        return Err(TreeError::LevelOutOfRange {
            level,
            levels: tree.depth(),
        });
    }
    Ok(nodes[level])
}

fn offsets_of(widths: &[usize]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(widths.len());
    let mut acc = 0;
    for w in widths {
        offsets.push(acc);
        acc += w;
    }
    (offsets, acc)
}

pub fn ceil_log2(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotLayout {
    pub per_level_width: Vec<usize>,
    pub offsets: Vec<usize>,
    pub total_width: usize,
}

impl OneHotLayout {
    pub fn from_tree(tree: &SemanticTree) -> Self {
        let per_level_width = tree.level_widths();
        let (offsets, total_width) = offsets_of(&per_level_width);
        Self {
            per_level_width,
            offsets,
            total_width,
        }
    }

    pub fn slice(&self, level: usize) -> Range<usize> {
        self.offsets[level]..self.offsets[level] + self.per_level_width[level]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryLayout {
    pub per_level_bits: Vec<usize>,
    pub offsets: Vec<usize>,
    pub total_width: usize,
}

impl BinaryLayout {
    pub fn from_tree(tree: &SemanticTree) -> Self {
        let per_level_bits: Vec<usize> = tree.level_widths().into_iter().map(ceil_log2).collect();
        let (offsets, total_width) = offsets_of(&per_level_bits);
        Self {
            per_level_bits,
            offsets,
            total_width,
        }
    }

    pub fn slice(&self, level: usize) -> Range<usize> {
        self.offsets[level]..self.offsets[level] + self.per_level_bits[level]
    }
}

pub fn encode_one_hot(
    tree: &SemanticTree,
    layout: &OneHotLayout,
    path: &HierPath,
) -> Result<Vec<f64>, TreeError> {
    tree.check_path(path)?;
    let mut out = vec![0.0; layout.total_width];
    for (l, &node) in path.0.iter().enumerate() {
        out[layout.offsets[l] + tree.sibling_rank(l, node)] = 1.0;
    }
    Ok(out)
}

pub fn encode_binary(
    tree: &SemanticTree,
    layout: &BinaryLayout,
    path: &HierPath,
) -> Result<Vec<f64>, TreeError> {
    tree.check_path(path)?;
    let mut out = vec![0.0; layout.total_width];
    for (l, &node) in path.0.iter().enumerate() {
        let r = tree.sibling_rank(l, node);
        for (j, v) in out[layout.slice(l)].iter_mut().enumerate() {
            *v = ((r >> j) & 1) as f64;
        }
    }
    Ok(out)
}

/// Result of decoding an embedding back to the hierarchy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub class_id: u32,
    pub nodes: Vec<usize>,
}

/// Greedy top-down decode: per level, argmax over the children of the
/// previous choice. Ties go to the lowest rank; NaN never wins.
pub fn decode_one_hot(
    tree: &SemanticTree,
    layout: &OneHotLayout,
    embedding: &[f64],
) -> Result<Decoded, TreeError> {
    if embedding.len() != layout.total_width {
        return Err(TreeError::EmbeddingLength {
            expected: layout.total_width,
            got: embedding.len(),
        });
    }
    let mut nodes = Vec::with_capacity(tree.depth());
    let mut parent = None;
    for l in 0..tree.depth() {
        let slice = &embedding[layout.slice(l)];
        let valid = tree.choices(l, parent);
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (r, &v) in slice.iter().take(valid).enumerate() {
            if v > best_v {
                best_v = v;
                best = r;
            }
        }
        let node = tree.node_from_rank(l, parent, best);
        nodes.push(node);
        parent = Some(node);
    }
    let leaf = *nodes.last().expect("depth >= 1");
    Ok(Decoded {
        class_id: tree.class_of_leaf(leaf),
        nodes,
    })
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per level: squash, threshold strictly above 0.5, clamp to the level width,
/// and repair to the nearest valid child by Hamming distance.
pub fn decode_binary(
    tree: &SemanticTree,
    layout: &BinaryLayout,
    embedding: &[f64],
) -> Result<Decoded, TreeError> {
    if embedding.len() != layout.total_width {
        return Err(TreeError::EmbeddingLength {
            expected: layout.total_width,
            got: embedding.len(),
        });
    }
    let widths = tree.level_widths();
    let mut nodes = Vec::with_capacity(tree.depth());
    let mut parent = None;
    for l in 0..tree.depth() {
        let mut index = 0usize;
        for (j, &v) in embedding[layout.slice(l)].iter().enumerate() {
            if logistic(v) > 0.5 {
                index |= 1 << j;
            }
        }
        index = index.min(widths[l] - 1);
        let valid = tree.choices(l, parent);
        if index >= valid {
            index = (0..valid)
                .min_by_key(|&r| ((r ^ index).count_ones(), r))
                .expect("every internal node has a child");
        }
        let node = tree.node_from_rank(l, parent, index);
        nodes.push(node);
        parent = Some(node);
    }
    let leaf = *nodes.last().expect("depth >= 1");
    Ok(Decoded {
        class_id: tree.class_of_leaf(leaf),
        nodes,
    })
}

/// Which code the Gaussians carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutKind {
    Flat,
    #[serde(alias = "one-hot")]
    Onehot,
    Binary,
}

impl std::str::FromStr for LayoutKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flat" => Ok(Self::Flat),
            "onehot" | "one-hot" => Ok(Self::Onehot),
            "binary" => Ok(Self::Binary),
            other => Err(format!("unknown layout '{other}'")),
        }
    }
}

/// A tree plus the active code. In flat mode the code is the one-hot code of
/// the single-level tree over the same classes, while per-level lifting still
/// uses the full hierarchy.
#[derive(Debug, Clone)]
pub struct SemanticCodec {
    kind: LayoutKind,
    tree: Arc<SemanticTree>,
    code_tree: Arc<SemanticTree>,
    one_hot: OneHotLayout,
    binary: BinaryLayout,
    flat_lookup: HashMap<u32, usize>,
}

impl SemanticCodec {
    pub fn new(tree: Arc<SemanticTree>, kind: LayoutKind) -> Result<Self, TreeError> {
        let code_tree = match kind {
            LayoutKind::Flat => {
                let classes: Vec<(u32, String)> = tree
                    .class_ids()
                    .map(|c| (c, tree.class_name(c).unwrap_or_default().to_string()))
                    .collect();
                Arc::new(SemanticTree::flat(&classes)?)
            }
            _ => tree.clone(),
        };
        let one_hot = OneHotLayout::from_tree(&code_tree);
        let binary = BinaryLayout::from_tree(&code_tree);
        let flat_lookup = tree.class_ids().enumerate().map(|(i, c)| (c, i)).collect();
        Ok(Self {
            kind,
            tree,
            code_tree,
            one_hot,
            binary,
            flat_lookup,
        })
    }

    pub fn kind(&self) -> LayoutKind {
        self.kind
    }

    pub fn tree(&self) -> &Arc<SemanticTree> {
        &self.tree
    }

    /// The tree whose levels the code is laid out over.
    pub fn code_tree(&self) -> &Arc<SemanticTree> {
        &self.code_tree
    }

    pub fn one_hot_layout(&self) -> &OneHotLayout {
        &self.one_hot
    }

    pub fn binary_layout(&self) -> &BinaryLayout {
        &self.binary
    }

    pub fn width(&self) -> usize {
        match self.kind {
            LayoutKind::Binary => self.binary.total_width,
            _ => self.one_hot.total_width,
        }
    }

    pub fn is_binary(&self) -> bool {
        self.kind == LayoutKind::Binary
    }

    pub fn code_levels(&self) -> usize {
        self.code_tree.depth()
    }

    pub fn level_slice(&self, level: usize) -> Range<usize> {
        match self.kind {
            LayoutKind::Binary => self.binary.slice(level),
            _ => self.one_hot.slice(level),
        }
    }

    pub fn class_count(&self) -> usize {
        self.tree.class_count()
    }

    pub fn flat_index(&self, class_id: u32) -> Option<usize> {
        self.flat_lookup.get(&class_id).copied()
    }

    /// Sibling ranks along the code tree's path for a class.
    pub fn code_ranks(&self, class_id: u32) -> Result<Vec<usize>, TreeError> {
        let path = self.code_tree.path_of(class_id)?;
        Ok(path
            .0
            .iter()
            .enumerate()
            .map(|(l, &n)| self.code_tree.sibling_rank(l, n))
            .collect())
    }

    pub fn encode(&self, class_id: u32) -> Result<Vec<f64>, TreeError> {
        let path = self.code_tree.path_of(class_id)?;
        match self.kind {
            LayoutKind::Binary => encode_binary(&self.code_tree, &self.binary, path),
            _ => encode_one_hot(&self.code_tree, &self.one_hot, path),
        }
    }

    pub fn decode_class(&self, embedding: &[f64]) -> Result<u32, TreeError> {
        let d = match self.kind {
            LayoutKind::Binary => decode_binary(&self.code_tree, &self.binary, embedding)?,
            _ => decode_one_hot(&self.code_tree, &self.one_hot, embedding)?,
        };
        Ok(d.class_id)
    }

    /// Decodes to per-level node indices of the full hierarchy.
    pub fn decode(&self, embedding: &[f64]) -> Result<Decoded, TreeError> {
        let class_id = self.decode_class(embedding)?;
        let nodes = self.tree.path_of(class_id)?.0.clone();
        Ok(Decoded { class_id, nodes })
    }
}
