use std::io::{BufRead, Write};
use std::path::Path;

use hiersplat_taxonomy::llm_client::{HttpClient, HttpConfig, LlmClient, RecordingClient, ReplayClient};
use hiersplat_taxonomy::tree_builder::{build_tree, BuilderConfig, FileShapes, ShapeProvider, SyntheticShapes};
use serde::Deserialize;

use crate::error::{CliError, CliResult};
use crate::TreeBuildArgs;

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct TreeConfig {
    builder: BuilderConfig,
    http: HttpConfig,
}

/// Parses `id name` lines (comma or whitespace separated); `#` comments.
pub fn parse_classes(text: &str) -> CliResult<Vec<(u32, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, name) = line
            .split_once(|c: char| c == ',' || c.is_whitespace())
            .ok_or_else(|| CliError::config(format!("classes line {}: expected `id name`", n + 1)))?;
        let id: u32 = id
            .trim()
            .parse()
            .map_err(|_| CliError::config(format!("classes line {}: bad id {id:?}", n + 1)))?;
        out.push((id, name.trim().to_string()));
    }
    if out.is_empty() {
        return Err(CliError::config("class list is empty"));
    }
    Ok(out)
}

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::generic(format!("{}: {e}", path.display())))
}

pub fn build(a: &TreeBuildArgs) -> CliResult<()> {
    let classes = parse_classes(&read(&a.classes)?)?;
    let config: TreeConfig = match &a.config {
        Some(p) => serde_json::from_str(&read(p)?)?,
        None => TreeConfig::default(),
    };
    let shapes: Box<dyn ShapeProvider> = match (&a.shape_embeddings, a.synthetic_shapes) {
        (Some(p), _) => Box::new(FileShapes::load(p)?),
        (None, true) => Box::new(SyntheticShapes::new(a.seed)),
        (None, false) => return Err(CliError::config("need --shape-embeddings FILE or --synthetic-shapes")),
    };
    let client: Box<dyn LlmClient> = match (&a.mock, &a.llm_endpoint) {
        (Some(t), _) => Box::new(ReplayClient::load(t)?),
        (None, endpoint) => {
            let mut http = config.http.clone();
            if let Some(e) = endpoint {
                http.endpoint = e.clone();
            }
            Box::new(HttpClient::from_env(http)?)
        }
    };
    let out = match &a.record {
        Some(path) => {
            let recorder = RecordingClient::new(client);
            let out = build_tree(&classes, &config.builder, &recorder, shapes.as_ref(), a.seed);
            recorder.transcript().save(path)?;
            out
        }
        None => build_tree(&classes, &config.builder, client.as_ref(), shapes.as_ref(), a.seed),
    };
    let out = out?;
    let json = out.document.to_json();
    if a.review {
        print!("{json}");
        eprint!("write {}? [y/N] ", a.out.display());
        std::io::stderr().flush()?;
        let mut answer = String::new();
        std::io::stdin().lock().read_line(&mut answer)?;
        if !matches!(answer.trim(), "y" | "Y" | "yes") {
            eprintln!("not written");
            return Ok(());
        }
    }
    std::fs::write(&a.out, &json)?;
    if !out.report.is_empty() {
        return Err(CliError::validation(format!(
            "tree failed validation: {}",
            serde_json::to_string_pretty(&out.report)?
        )));
    }
    Ok(())
}
