//! A deterministic stand-in for the language model, answering each template
//! from fixed lookup tables. Used to record the golden transcript.
#![allow(dead_code)]

use std::sync::Mutex;

use hiersplat_core::semantic_tree::{TreeDocument, TreeNode};
use hiersplat_taxonomy::llm_client::{parse_group_json, Bindings, LlmClient, LlmError, TemplateName};
use hiersplat_taxonomy::tree_builder::ValidationReport;

pub const TOY_CLASSES: [(u32, &str); 12] = [
    (1, "floor"),
    (2, "wall"),
    (3, "sofa"),
    (4, "bed"),
    (5, "table"),
    (6, "chair"),
    (7, "lamp"),
    (8, "book"),
    (9, "cup"),
    (10, "plate"),
    (11, "pillow"),
    (12, "vase"),
];

pub fn toy_classes() -> Vec<(u32, String)> {
    TOY_CLASSES.iter().map(|(i, n)| (*i, n.to_string())).collect()
}

fn size_of(name: &str) -> &'static str {
    match name {
        "floor" | "wall" | "sofa" | "bed" | "table" | "chair" => "large",
        _ => "small",
    }
}

fn function_of(name: &str) -> &'static str {
    match name {
        "floor" | "wall" => "structure",
        "sofa" | "bed" | "table" | "chair" => "furniture",
        "cup" | "plate" | "vase" => "tableware",
        _ => "household",
    }
}

fn shape_of(name: &str) -> &'static str {
    match name {
        "floor" | "wall" | "plate" => "flat",
        "sofa" | "bed" | "pillow" => "soft",
        "table" | "chair" | "book" => "box",
        "cup" | "vase" => "cylinder",
        _ => "round",
    }
}

/// Groups `items` by `key`, keeping first-appearance order.
fn group(items: &[String], key: impl Fn(&str) -> &'static str) -> Vec<(String, Vec<String>)> {
    let mut out: Vec<(String, Vec<String>)> = Vec::new();
    for it in items {
        let k = key(it);
        match out.iter_mut().find(|g| g.0 == k) {
            Some(g) => g.1.push(it.clone()),
            None => out.push((k.to_string(), vec![it.clone()])),
        }
    }
    out
}

fn reply(groups: &[(String, Vec<String>)]) -> String {
    let body = hiersplat_taxonomy::llm_client::format_groups(groups);
    format!("Here is the grouping:\n```json\n{body}\n```")
}

/// Answers prompts from the tables above. The first size reply drops one
/// class so that the validator gets exercised.
#[derive(Default)]
pub struct RuleResponder {
    pub omit_first: Option<String>,
    size_calls: Mutex<usize>,
}

impl RuleResponder {
    pub fn omitting(name: &str) -> Self {
        Self {
            omit_first: Some(name.to_string()),
            size_calls: Mutex::new(0),
        }
    }
}

impl LlmClient for RuleResponder {
    fn send(&self, template: TemplateName, bindings: &Bindings, _prompt: &str) -> Result<String, LlmError> {
        match template {
            TemplateName::Size | TemplateName::Function => {
                let items: Vec<String> = serde_json::from_str(&bindings.0["classes input"])
                    .map_err(|e| LlmError::UnparseableResponse(e.to_string()))?;
                if template == TemplateName::Function {
                    return Ok(reply(&group(&items, function_of)));
                }
                let mut calls = self.size_calls.lock().unwrap();
                *calls += 1;
                let mut items = items;
                if *calls == 1 {
                    if let Some(o) = &self.omit_first {
                        items.retain(|i| i != o);
                    }
                }
                Ok(reply(&group(&items, size_of)))
            }
            TemplateName::GeometrySummarize => {
                let clusters = parse_group_json(&bindings.0["formatted_clusters"])?;
                let mut out: Vec<(String, Vec<String>)> = Vec::new();
                for (_, members) in clusters {
                    let base = shape_of(&members[0]);
                    let mut name = base.to_string();
                    let mut n = 2;
                    while out.iter().any(|g| g.0 == name) {
                        name = format!("{base} {n}");
                        n += 1;
                    }
                    out.push((name, members));
                }
                Ok(reply(&out))
            }
            TemplateName::Validator => {
                let groups = parse_group_json(&bindings.0["formatted_clusters"])?;
                let mut out: Vec<(String, Vec<String>)> = Vec::new();
                let mut loose = Vec::new();
                for (name, members) in groups {
                    if name == "unassigned" {
                        loose = members;
                    } else {
                        out.push((name, members));
                    }
                }
                for item in loose {
                    let k = size_of(&item);
                    match out.iter_mut().find(|g| g.0 == k) {
                        Some(g) => g.1.push(item),
                        None => out.push((k.to_string(), vec![item])),
                    }
                }
                Ok(reply(&out))
            }
        }
    }
}

pub type Mutation = (
    &'static str,
    fn(&mut TreeDocument, &mut Vec<(u32, String)>),
    fn(&ValidationReport) -> bool,
);

/// Ten edits of the golden toy tree (or its class list), each breaking one
/// structural rule, with the report entry that must catch it.
pub fn mutation_suite() -> Vec<Mutation> {
    vec![
        (
            "class dropped from mapping",
            |d, _| {
                d.classes.remove(&3);
            },
            |r| r.missing_classes == ["sofa"],
        ),
        (
            "class added to input list",
            |_, c| c.push((13, "rug".into())),
            |r| r.missing_classes == ["rug"],
        ),
        (
            "unknown class in tree",
            |_, c| c.retain(|x| x.0 != 5),
            |r| r.unknown_classes == ["table"],
        ),
        (
            "two classes share a leaf",
            |d, _| {
                let leaf = d.classes[&1];
                d.classes.insert(2, leaf);
            },
            |r| r.duplicate_leaves.contains(&"floor".to_string()) && r.duplicate_leaves.contains(&"wall".to_string()),
        ),
        (
            "leaf renamed to a sibling's name",
            |d, _| {
                let l = d.levels.len() - 1;
                let i = d.classes[&2];
                d.levels[l][i].name = "floor".into();
            },
            |r| r.duplicate_leaves == ["floor"],
        ),
        (
            "node loses its parent",
            |d, _| d.levels[1][0].parent = None,
            |r| r.orphan_nodes.contains(&(1, 0)),
        ),
        (
            "parent index out of range",
            |d, _| d.levels[2][0].parent = Some(99),
            |r| r.orphan_nodes.contains(&(2, 0)),
        ),
        (
            "inner node without children",
            |d, _| d.levels[1].push(TreeNode {
                name: "empty".into(),
                parent: Some(0),
            }),
            |r| r.empty_nodes == [(1, 4)],
        ),
        (
            "leaf without a class",
            |d, _| {
                let l = d.levels.len() - 1;
                d.levels[l].push(TreeNode {
                    name: "ghost".into(),
                    parent: Some(0),
                });
            },
            |r| r.empty_nodes.contains(&(3, 12)),
        ),
        (
            "empty level",
            |d, _| d.levels.insert(1, Vec::new()),
            |r| r.empty_levels == [1],
        ),
    ]
}
