//! Builds a semantic hierarchy from a flat class list: size groups, one or
//! more levels of functional groups, shape clusters named by the language
//! model, then the original classes as leaves.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use hiersplat_core::semantic_tree::{TreeDocument, TreeNode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm_client::{parse_group_json, Bindings, LlmClient, LlmError, TemplateName};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BuildError {
    #[error("language model unavailable: {0}")]
    LlmUnavailable(LlmError),
    #[error("unparseable response after {attempts} attempts: {last}")]
    UnparseableResponse { attempts: usize, last: String },
    #[error("critic gave up after {rounds} rounds; still missing {remaining:?}")]
    CriticBudgetExhausted { rounds: usize, remaining: Vec<String> },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("no shape embedding for class {0}")]
    MissingEmbedding(String),
    #[error("shape embeddings: {0}")]
    Shapes(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl From<LlmError> for BuildError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::UnparseableResponse(text) => BuildError::UnparseableResponse { attempts: 1, last: text },
            other => BuildError::LlmUnavailable(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Size,
    Function,
    Geometry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingResult {
    pub groups: Vec<(String, Vec<String>)>,
    pub provenance: Provenance,
}

impl GroupingResult {
    pub fn members(&self) -> impl Iterator<Item = &String> {
        self.groups.iter().flat_map(|(_, m)| m.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuilderConfig {
    /// Number of functional-grouping levels under the size level.
    pub functional_levels: usize,
    /// Shape clusters per group; `None` picks ⌈√n⌉.
    pub geometric_k: Option<usize>,
    pub critic_rounds: usize,
    /// Prompt attempts when a reply cannot be parsed.
    pub retries: usize,
}

impl Default for BuilderConfig {
    fn default() -> Self {
        Self {
            functional_levels: 1,
            geometric_k: None,
            critic_rounds: 5,
            retries: 3,
        }
    }
}

/// Asks the model and parses its grouping, re-asking on malformed replies.
fn ask(llm: &dyn LlmClient, template: TemplateName, bindings: &Bindings, retries: usize) -> Result<Vec<(String, Vec<String>)>, BuildError> {
    let attempts = retries.max(1);
    let mut last = String::new();
    for _ in 0..attempts {
        let text = llm.complete(template, bindings)?;
        match parse_group_json(&text) {
            Ok(groups) => return Ok(groups),
            Err(LlmError::UnparseableResponse(t)) => {
                log::warn!("{template}: unparseable reply, asking again");
                last = t;
            }
            Err(e) => return Err(e.into()),
        }
    }
    Err(BuildError::UnparseableResponse { attempts, last })
}

pub fn group_by_size(classes: &[String], llm: &dyn LlmClient, config: &BuilderConfig) -> Result<GroupingResult, BuildError> {
    if classes.is_empty() {
        return Err(BuildError::InvalidInput("empty class list".into()));
    }
    if classes.len() == 1 {
        return Ok(single(classes, Provenance::Size));
    }
    let groups = ask(llm, TemplateName::Size, &Bindings::classes(classes), config.retries)?;
    critic_loop(
        GroupingResult {
            groups,
            provenance: Provenance::Size,
        },
        classes,
        llm,
        config.critic_rounds,
    )
}

/// Functional sub-groups of one group; `size` names the enclosing size group.
pub fn group_by_function(
    members: &[String],
    size: &str,
    llm: &dyn LlmClient,
    config: &BuilderConfig,
) -> Result<GroupingResult, BuildError> {
    if members.is_empty() {
        return Err(BuildError::InvalidInput("empty group".into()));
    }
    if members.len() == 1 {
        return Ok(single(members, Provenance::Function));
    }
    let bindings = Bindings::classes(members).with("size", size);
    let groups = ask(llm, TemplateName::Function, &bindings, config.retries)?;
    critic_loop(
        GroupingResult {
            groups,
            provenance: Provenance::Function,
        },
        members,
        llm,
        config.critic_rounds,
    )
}

/// Names shape clusters (and lets the model rebalance them).
pub fn summarize_clusters(clusters: &[Vec<String>], llm: &dyn LlmClient, config: &BuilderConfig) -> Result<GroupingResult, BuildError> {
    let expected: Vec<String> = clusters.iter().flatten().cloned().collect();
    if expected.is_empty() {
        return Err(BuildError::InvalidInput("no clusters".into()));
    }
    if expected.len() == 1 {
        return Ok(single(&expected, Provenance::Geometry));
    }
    let formatted: Vec<(String, Vec<String>)> = clusters
        .iter()
        .enumerate()
        .map(|(i, c)| (format!("cluster_{}", i + 1), c.clone()))
        .collect();
    let groups = ask(llm, TemplateName::GeometrySummarize, &Bindings::clusters(&formatted), config.retries)?;
    critic_loop(
        GroupingResult {
            groups,
            provenance: Provenance::Geometry,
        },
        &expected,
        llm,
        config.critic_rounds,
    )
}

fn single(members: &[String], provenance: Provenance) -> GroupingResult {
    GroupingResult {
        groups: vec![(members[0].clone(), members.to_vec())],
        provenance,
    }
}

/// Drops invented and repeated members (first occurrence wins), then empty
/// groups. Returns the expected members still missing, in input order.
fn clean(groups: &mut Vec<(String, Vec<String>)>, expected: &[String]) -> Vec<String> {
    let allowed: HashSet<&str> = expected.iter().map(String::as_str).collect();
    let mut seen: HashSet<String> = HashSet::new();
    for (_, members) in groups.iter_mut() {
        members.retain(|m| allowed.contains(m.as_str()) && seen.insert(m.clone()));
    }
    groups.retain(|(_, m)| !m.is_empty());
    expected.iter().filter(|m| !seen.contains(*m)).cloned().collect()
}

/// Checks a proposal against the expected members and, while classes are
/// missing, hands the grouping plus an `unassigned` group of the omissions to
/// the validator prompt.
pub fn critic_loop(
    proposed: GroupingResult,
    expected: &[String],
    llm: &dyn LlmClient,
    max_rounds: usize,
) -> Result<GroupingResult, BuildError> {
    if max_rounds == 0 {
        return Err(BuildError::InvalidInput("critic needs at least one round".into()));
    }
    let provenance = proposed.provenance;
    let mut groups = proposed.groups;
    let mut missing = clean(&mut groups, expected);
    let mut rounds = 1;
    while !missing.is_empty() {
        if rounds >= max_rounds {
            return Err(BuildError::CriticBudgetExhausted {
                rounds,
                remaining: missing,
            });
        }
        rounds += 1;
        log::info!("critic round {rounds}: {} omitted", missing.len());
        let mut shown = groups.clone();
        shown.push(("unassigned".into(), missing.clone()));
        let mut reply = ask(llm, TemplateName::Validator, &Bindings::clusters(&shown), 1)?;
        missing = clean(&mut reply, expected);
        groups = reply;
    }
    Ok(GroupingResult { groups, provenance })
}

/// Quantized per-face shape codes of one class, `F × 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeEmbedding {
    pub class_id: u32,
    pub faces: Vec<[f64; 2]>,
}

impl ShapeEmbedding {
    pub fn average(&self) -> [f64; 2] {
        let n = self.faces.len().max(1) as f64;
        let s = self.faces.iter().fold([0.0, 0.0], |a, f| [a[0] + f[0], a[1] + f[1]]);
        [s[0] / n, s[1] / n]
    }
}

pub trait ShapeProvider {
    fn embedding(&self, class_id: u32, name: &str) -> Result<ShapeEmbedding, BuildError>;
}

/// Reads `class_id,face_index,e0,e1` rows; `#` starts a comment line.
#[derive(Debug, Clone, Default)]
pub struct FileShapes {
    by_class: BTreeMap<u32, Vec<(usize, [f64; 2])>>,
}

impl FileShapes {
    pub fn load(path: &Path) -> Result<Self, BuildError> {
        let file = std::fs::File::open(path).map_err(|e| BuildError::Shapes(format!("{}: {e}", path.display())))?;
        Self::parse(std::io::BufReader::new(file))
    }

    pub fn parse(reader: impl BufRead) -> Result<Self, BuildError> {
        let mut by_class: BTreeMap<u32, Vec<(usize, [f64; 2])>> = BTreeMap::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| BuildError::Shapes(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("class_id") {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || BuildError::Shapes(format!("line {}: expected class_id,face_index,e0,e1", n + 1));
            if cols.len() != 4 {
                return Err(bad());
            }
            let class: u32 = cols[0].parse().map_err(|_| bad())?;
            let face: usize = cols[1].parse().map_err(|_| bad())?;
            let e0: f64 = cols[2].parse().map_err(|_| bad())?;
            let e1: f64 = cols[3].parse().map_err(|_| bad())?;
            by_class.entry(class).or_default().push((face, [e0, e1]));
        }
        for faces in by_class.values_mut() {
            faces.sort_by_key(|f| f.0);
        }
        Ok(Self { by_class })
    }
}

impl ShapeProvider for FileShapes {
    fn embedding(&self, class_id: u32, name: &str) -> Result<ShapeEmbedding, BuildError> {
        let faces = self
            .by_class
            .get(&class_id)
            .ok_or_else(|| BuildError::MissingEmbedding(name.to_string()))?;
        Ok(ShapeEmbedding {
            class_id,
            faces: faces.iter().map(|f| f.1).collect(),
        })
    }
}

/// Deterministic stand-in codes derived from a hash of the class name.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticShapes {
    pub seed: u64,
    pub faces: usize,
}

impl SyntheticShapes {
    pub fn new(seed: u64) -> Self {
        Self { seed, faces: 16 }
    }
}

/// FNV-1a, stable across platforms and releases.
fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ShapeProvider for SyntheticShapes {
    fn embedding(&self, class_id: u32, name: &str) -> Result<ShapeEmbedding, BuildError> {
        let mut rng = ChaCha8Rng::seed_from_u64(name_hash(name) ^ self.seed);
        let center = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
        let faces = (0..self.faces.max(1))
            .map(|_| {
                [
                    (center[0] + rng.random_range(-1.0..1.0) as f64).round(),
                    (center[1] + rng.random_range(-1.0..1.0) as f64).round(),
                ]
            })
            .collect();
        Ok(ShapeEmbedding { class_id, faces })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub rows: Vec<[f64; 2]>,
    /// Columns whose variance vanished; they come out as zeros.
    pub degenerate_columns: Vec<usize>,
}

/// Per-class face average, then column-wise standardization.
pub fn average_and_normalize(embeddings: &[ShapeEmbedding]) -> Result<Normalized, BuildError> {
    if embeddings.len() < 2 {
        return Err(BuildError::TooFewPoints {
            needed: 2,
            got: embeddings.len(),
        });
    }
    let avg: Vec<[f64; 2]> = embeddings.iter().map(ShapeEmbedding::average).collect();
    let n = avg.len() as f64;
    let mut rows = avg.clone();
    let mut degenerate_columns = Vec::new();
    for c in 0..2 {
        let mean = avg.iter().map(|r| r[c]).sum::<f64>() / n;
        let var = avg.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var < 1e-12 {
            log::warn!("shape column {c} has no variance");
            degenerate_columns.push(c);
            1.0
        } else {
            var.sqrt()
        };
        for (row, a) in rows.iter_mut().zip(&avg) {
            row[c] = (a[c] - mean) / sd;
        }
    }
    Ok(Normalized { rows, degenerate_columns })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignment: Vec<usize>,
    pub centroids: Vec<[f64; 2]>,
    /// Within-cluster sum of squares after seeding and after every Lloyd step.
    pub inertia: Vec<f64>,
}

fn dist2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(p: &[f64; 2], centroids: &[[f64; 2]]) -> usize {
    let mut best = 0;
    for (j, c) in centroids.iter().enumerate() {
        if dist2(p, c) < dist2(p, &centroids[best]) {
            best = j;
        }
    }
    best
}

fn inertia(points: &[[f64; 2]], centroids: &[[f64; 2]], assignment: &[usize]) -> f64 {
    points.iter().zip(assignment).map(|(p, &a)| dist2(p, &centroids[a])).sum()
}

/// K-means with D² seeding, Lloyd steps until the assignment stops changing
/// (at most 100). Ties go to the lowest index.
pub fn kmeans_pp(points: &[[f64; 2]], k: usize, seed: u64) -> Result<KMeans, BuildError> {
    if k == 0 {
        return Err(BuildError::InvalidInput("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(BuildError::TooFewPoints {
            needed: k,
            got: points.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut chosen = vec![false; points.len()];
    while centroids.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let pick = if total <= 0.0 {
            // every point coincides with a centroid: take the first unused one
            (0..points.len()).find(|&i| !chosen[i]).unwrap_or(0)
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, di) in d.iter().enumerate() {
                if r < *di {
                    pick = i;
                    break;
                }
                r -= di;
            }
            pick
        };
        chosen[pick] = true;
        centroids.push(points[pick]);
    }
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut history = vec![inertia(points, &centroids, &assignment)];
    for _ in 0..100 {
        for (j, c) in centroids.iter_mut().enumerate() {
            let mut sum = [0.0, 0.0];
            let mut n = 0usize;
            for (p, &a) in points.iter().zip(&assignment) {
                if a == j {
                    sum[0] += p[0];
                    sum[1] += p[1];
                    n += 1;
                }
            }
            if n > 0 {
                *c = [sum[0] / n as f64, sum[1] / n as f64];
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        history.push(inertia(points, &centroids, &next));
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok(KMeans {
        assignment,
        centroids,
        inertia: history,
    })
}

/// Problems found in a tree document. Empty means the tree is sound.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Class names that appear on more than one leaf or share a leaf.
    pub duplicate_leaves: Vec<String>,
    pub missing_classes: Vec<String>,
    /// Classes in the tree that are not in the input list.
    pub unknown_classes: Vec<String>,
    /// `(level, node)` of non-leaf nodes without children, or leaves without a class.
    pub empty_nodes: Vec<(usize, usize)>,
    /// `(level, node)` of nodes whose parent link is absent or out of range.
    pub orphan_nodes: Vec<(usize, usize)>,
    pub empty_levels: Vec<usize>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.duplicate_leaves.is_empty()
            && self.missing_classes.is_empty()
            && self.unknown_classes.is_empty()
            && self.empty_nodes.is_empty()
            && self.orphan_nodes.is_empty()
            && self.empty_levels.is_empty()
    }
}

/// Structural check of a tree document against the intended class list.
pub fn validate_tree(doc: &TreeDocument, classes: &[(u32, String)]) -> ValidationReport {
    let mut report = ValidationReport::default();
    let depth = doc.levels.len();
    if depth == 0 {
        report.empty_levels.push(0);
        report.missing_classes = classes.iter().map(|c| c.1.clone()).collect();
        return report;
    }
    for (l, level) in doc.levels.iter().enumerate() {
        if level.is_empty() {
            report.empty_levels.push(l);
        }
        for (i, node) in level.iter().enumerate() {
            let ok = match (l, node.parent) {
                (0, None) => true,
                (0, Some(_)) | (_, None) => false,
                (_, Some(p)) => p < doc.levels[l - 1].len(),
            };
            if !ok {
                report.orphan_nodes.push((l, i));
            }
        }
    }
    for l in 0..depth.saturating_sub(1) {
        let mut has_child = vec![false; doc.levels[l].len()];
        for node in &doc.levels[l + 1] {
            if let Some(p) = node.parent.filter(|&p| p < has_child.len()) {
                has_child[p] = true;
            }
        }
        for (i, h) in has_child.iter().enumerate() {
            if !h {
                report.empty_nodes.push((l, i));
            }
        }
    }
    let leaves = &doc.levels[depth - 1];
    let expected: BTreeMap<u32, &str> = classes.iter().map(|(id, n)| (*id, n.as_str())).collect();
    let mut leaf_users: HashMap<usize, Vec<u32>> = HashMap::new();
    for (&id, &leaf) in &doc.classes {
        let name = expected.get(&id).copied().map(str::to_string);
        match name {
            None => report.unknown_classes.push(
                leaves
                    .get(leaf)
                    .map(|n| n.name.clone())
                    .unwrap_or_else(|| format!("#{id}")),
            ),
            Some(name) => {
                if leaf >= leaves.len() {
                    report.missing_classes.push(name);
                    continue;
                }
                if leaves[leaf].name != name {
                    report.unknown_classes.push(leaves[leaf].name.clone());
                }
            }
        }
        leaf_users.entry(leaf).or_default().push(id);
    }
    for (id, name) in &expected {
        if !doc.classes.contains_key(id) {
            report.missing_classes.push(name.to_string());
        }
    }
    let mut by_name: HashMap<&str, usize> = HashMap::new();
    for node in leaves {
        *by_name.entry(node.name.as_str()).or_default() += 1;
    }
    let mut dup: BTreeSet<String> = by_name
        .into_iter()
        .filter(|(_, n)| *n > 1)
        .map(|(name, _)| name.to_string())
        .collect();
    for ids in leaf_users.values().filter(|ids| ids.len() > 1) {
        for id in ids {
            dup.insert(expected.get(id).map(|s| s.to_string()).unwrap_or_else(|| format!("#{id}")));
        }
    }
    report.duplicate_leaves = dup.into_iter().collect();
    for i in 0..leaves.len() {
        if !leaf_users.contains_key(&i) {
            report.empty_nodes.push((depth - 1, i));
        }
    }
    report.missing_classes.sort();
    report.missing_classes.dedup();
    report.unknown_classes.sort();
    report.unknown_classes.dedup();
    report
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutput {
    pub document: TreeDocument,
    pub report: ValidationReport,
}

/// One node of the hierarchy under construction: its name and the classes
/// below it.
struct Partial {
    name: String,
    parent: Option<usize>,
    members: Vec<String>,
}

/// Runs the whole pipeline. Node order follows the model's group order, so
/// identical replies give a byte-identical document.
pub fn build_tree(
    classes: &[(u32, String)],
    config: &BuilderConfig,
    llm: &dyn LlmClient,
    shapes: &dyn ShapeProvider,
    seed: u64,
) -> Result<BuildOutput, BuildError> {
    if classes.is_empty() {
        return Err(BuildError::InvalidInput("empty class list".into()));
    }
    let mut names = HashSet::new();
    for (_, n) in classes {
        if !names.insert(n.as_str()) {
            return Err(BuildError::InvalidInput(format!("class name {n:?} listed twice")));
        }
    }
    let all: Vec<String> = classes.iter().map(|c| c.1.clone()).collect();
    let ids: HashMap<&str, u32> = classes.iter().map(|(id, n)| (n.as_str(), *id)).collect();

    let size = group_by_size(&all, llm, config)?;
    let mut levels: Vec<Vec<Partial>> = vec![size
        .groups
        .into_iter()
        .map(|(name, members)| Partial {
            name,
            parent: None,
            members,
        })
        .collect()];

    // size-group name per node, carried down for the function prompt
    let mut size_of: Vec<String> = levels[0].iter().map(|p| p.name.clone()).collect();
    for _ in 0..config.functional_levels {
        let parent_level = levels.last().expect("size level");
        let mut next = Vec::new();
        let mut next_size = Vec::new();
        for (pi, parent) in parent_level.iter().enumerate() {
            let g = group_by_function(&parent.members, &size_of[pi], llm, config)?;
            for (name, members) in g.groups {
                next.push(Partial {
                    name,
                    parent: Some(pi),
                    members,
                });
                next_size.push(size_of[pi].clone());
            }
        }
        levels.push(next);
        size_of = next_size;
    }

    let parent_level = levels.last().expect("at least one level");
    let mut geometric = Vec::new();
    for (pi, parent) in parent_level.iter().enumerate() {
        let members = &parent.members;
        let clusters: Vec<Vec<String>> = if members.len() < 2 {
            vec![members.clone()]
        } else {
            let emb = members
                .iter()
                .map(|m| shapes.embedding(ids[m.as_str()], m))
                .collect::<Result<Vec<_>, _>>()?;
            let points = average_and_normalize(&emb)?.rows;
            let k = config
                .geometric_k
                .unwrap_or_else(|| (members.len() as f64).sqrt().ceil() as usize)
                .clamp(1, members.len());
            let km = kmeans_pp(&points, k, seed.wrapping_add(pi as u64))?;
            // clusters in order of their first member
            let mut order: Vec<usize> = Vec::new();
            for &a in &km.assignment {
                if !order.contains(&a) {
                    order.push(a);
                }
            }
            order
                .iter()
                .map(|&c| {
                    members
                        .iter()
                        .zip(&km.assignment)
                        .filter(|(_, &a)| a == c)
                        .map(|(m, _)| m.clone())
                        .collect()
                })
                .collect()
        };
        let g = summarize_clusters(&clusters, llm, config)?;
        for (name, members) in g.groups {
            geometric.push(Partial {
                name,
                parent: Some(pi),
                members,
            });
        }
    }
    levels.push(geometric);

    let mut leaves = Vec::new();
    let mut class_leaf = BTreeMap::new();
    for (pi, parent) in levels.last().expect("geometric level").iter().enumerate() {
        for m in &parent.members {
            class_leaf.insert(ids[m.as_str()], leaves.len());
            leaves.push(TreeNode {
                name: m.clone(),
                parent: Some(pi),
            });
        }
    }
    let mut doc_levels: Vec<Vec<TreeNode>> = levels
        .into_iter()
        .map(|level| {
            level
                .into_iter()
                .map(|p| TreeNode {
                    name: p.name,
                    parent: p.parent,
                })
                .collect()
        })
        .collect();
    doc_levels.push(leaves);
    let document = TreeDocument {
        levels: doc_levels,
        classes: class_leaf,
    };
    let report = validate_tree(&document, classes);
    Ok(BuildOutput { document, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_client::MockClient;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn critic_leaves_complete_grouping_alone() {
        let g = GroupingResult {
            groups: vec![("a".into(), s(&["x", "y"])), ("b".into(), s(&["z"]))],
            provenance: Provenance::Size,
        };
        let out = critic_loop(g.clone(), &s(&["x", "y", "z"]), &MockClient::new(), 1).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn critic_removes_invented_and_repeated() {
        let g = GroupingResult {
            groups: vec![("a".into(), s(&["x", "ghost", "y"])), ("b".into(), s(&["y"])), ("c".into(), s(&["z"]))],
            provenance: Provenance::Function,
        };
        let out = critic_loop(g, &s(&["x", "y", "z"]), &MockClient::new(), 1).unwrap();
        assert_eq!(out.groups, vec![("a".into(), s(&["x", "y"])), ("c".into(), s(&["z"]))]);
    }

    #[test]
    fn critic_budget() {
        let g = GroupingResult {
            groups: vec![("a".into(), s(&["x"]))],
            provenance: Provenance::Size,
        };
        let shown = vec![("a".to_string(), s(&["x"])), ("unassigned".to_string(), s(&["y"]))];
        let mock = MockClient::new().respond(TemplateName::Validator, &Bindings::clusters(&shown), r#"{"a":["x"]}"#);
        let err = critic_loop(g, &s(&["x", "y"]), &mock, 3).unwrap_err();
        assert_eq!(
            err,
            BuildError::CriticBudgetExhausted {
                rounds: 3,
                remaining: s(&["y"])
            }
        );
    }

    #[test]
    fn single_class_needs_no_model() {
        let g = group_by_size(&s(&["lamp"]), &MockClient::new(), &BuilderConfig::default()).unwrap();
        assert_eq!(g.groups, vec![("lamp".into(), s(&["lamp"]))]);
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let pts = [[0.0, 0.0], [2.0, 0.0], [1.0, 3.0]];
        let km = kmeans_pp(&pts, 1, 4).unwrap();
        assert_eq!(km.assignment, vec![0, 0, 0]);
        assert!((km.centroids[0][0] - 1.0).abs() < 1e-12);
        assert!((km.centroids[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_every_point_alone() {
        let pts = [[0.0, 0.0], [5.0, 0.0], [0.0, 5.0], [5.0, 5.0]];
        let km = kmeans_pp(&pts, 4, 1).unwrap();
        let mut a = km.assignment.clone();
        a.sort();
        a.dedup();
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn kmeans_too_few_points() {
        assert_eq!(
            kmeans_pp(&[[0.0, 0.0]], 2, 0).unwrap_err(),
            BuildError::TooFewPoints { needed: 2, got: 1 }
        );
    }

    #[test]
    fn normalize_symmetric_pair() {
        let e = [
            ShapeEmbedding {
                class_id: 1,
                faces: vec![[1.0, 0.0]],
            },
            ShapeEmbedding {
                class_id: 2,
                faces: vec![[-1.0, 0.0]],
            },
        ];
        let n = average_and_normalize(&e).unwrap();
        assert_eq!(n.rows, vec![[1.0, 0.0], [-1.0, 0.0]]);
        assert_eq!(n.degenerate_columns, vec![1]);
    }

    #[test]
    fn face_average_comes_first() {
        let e = ShapeEmbedding {
            class_id: 1,
            faces: vec![[1.0, 2.0], [3.0, 6.0]],
        };
        assert_eq!(e.average(), [2.0, 4.0]);
    }

    #[test]
    fn shape_file_parsing() {
        let text = "class_id,face_index,e0,e1\n# comment\n2,1,3,4\n2,0,1,2\n5,0,-1,0.5\n";
        let f = FileShapes::parse(text.as_bytes()).unwrap();
        assert_eq!(f.embedding(2, "b").unwrap().faces, vec![[1.0, 2.0], [3.0, 4.0]]);
        assert!(matches!(f.embedding(9, "z"), Err(BuildError::MissingEmbedding(_))));
        assert!(FileShapes::parse("1,2,3".as_bytes()).is_err());
    }

    #[test]
    fn synthetic_shapes_are_stable() {
        let a = SyntheticShapes::new(3).embedding(1, "chair").unwrap();
        let b = SyntheticShapes::new(3).embedding(1, "chair").unwrap();
        let c = SyntheticShapes::new(3).embedding(1, "table").unwrap();
        assert_eq!(a, b);
        assert_ne!(a.faces, c.faces);
        assert_eq!(name_hash(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(name_hash("a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn single_class_tree() {
        let classes = vec![(7, "lamp".to_string())];
        let out = build_tree(&classes, &BuilderConfig::default(), &MockClient::new(), &SyntheticShapes::new(0), 0).unwrap();
        assert!(out.report.is_empty());
        assert_eq!(out.document.levels.len(), 4);
        assert!(out.document.levels.iter().all(|l| l.len() == 1));
    }
}
