use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use hiersplat_core::datasets::{write_trajectory, Dataset};
use hiersplat_core::mono_prior::{partition_frames, AffineAlignment, SyntheticPriors};
use hiersplat_core::semantic_tree::{LayoutKind, SemanticTree};
use hiersplat_core::slam::{self, DatasetSource, FrameInput, FrameSource, SlamConfig, SlamMode, Timing};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::{LayoutArg, ModeArg, PresetArg, SlamRunArgs};

/// Written next to the outputs; enough to re-evaluate the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: PathBuf,
    pub frames: usize,
    pub config: SlamConfig,
    /// Tree file copied into the run directory, if semantics were on.
    pub tree: Option<String>,
    pub timing: Timing,
    pub wall_seconds: f64,
    /// Mono only: the alignment per image set, with the injected distortion
    /// when priors were synthetic.
    pub image_sets: Vec<ImageSetReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageSetReport {
    pub frames: Vec<usize>,
    pub estimated: AffineAlignment,
    pub injected: Option<AffineAlignment>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Traces {
    pub tracking: Vec<Vec<f64>>,
    pub mapping: Vec<(usize, Vec<f64>)>,
}

pub const RUN_FILE: &str = "run.json";
pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const MAP_FILE: &str = "map.hspp";
pub const METRICS_FILE: &str = "metrics.json";
pub const TRACES_FILE: &str = "traces.json";
pub const TREE_FILE: &str = "tree.json";

fn load_config(a: &SlamRunArgs) -> CliResult<SlamConfig> {
    let mut c = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
        }
        None => match a.preset {
            PresetArg::Default => SlamConfig::default(),
            PresetArg::Quality => SlamConfig::quality(),
        },
    };
    c.mode = match a.mode {
        ModeArg::Rgbd => SlamMode::Rgbd,
        ModeArg::Mono => SlamMode::Mono,
    };
    if let Some(l) = a.layout {
        c.layout = match l {
            LayoutArg::Flat => LayoutKind::Flat,
            LayoutArg::Onehot => LayoutKind::Onehot,
            LayoutArg::Binary => LayoutKind::Binary,
        };
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::generic(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn run(a: &SlamRunArgs) -> CliResult<()> {
    let mut config = load_config(a)?;
    let dataset = Dataset::open(&a.dataset)?;
    let k = dataset.manifest().intrinsics;
    let tree_path = a.tree.clone().or_else(|| dataset.tree_path().filter(|p| p.exists()));
    let tree = match &tree_path {
        Some(p) => Some(Arc::new(SemanticTree::load(p)?)),
        None if a.layout.is_some() => {
            return Err(CliError::config("--layout needs a semantic tree, and the dataset has none"));
        }
        None => {
            config.semantics = false;
            None
        }
    };
    let source = DatasetSource::new(dataset)?;
    let n = a.frames.unwrap_or(source.len()).min(source.len());
    let mut inputs: Vec<FrameInput> = (0..n).map(|i| source.get(i)).collect::<Result<_, _>>()?;

    let mut injected = None;
    if config.mode == SlamMode::Mono {
        if a.synthetic_prior {
            let depths: Vec<Vec<f64>> = inputs
                .iter()
                .map(|f| f.frame.depth.clone().ok_or_else(|| CliError::config("synthetic priors need dataset depth")))
                .collect::<Result<_, _>>()?;
            let priors = SyntheticPriors::new(&depths, &config.mono.image_sets, a.prior_noise, config.seed)
                .map_err(|e| CliError::config(e.to_string()))?;
            injected = Some((0..n).map(|i| priors.injected(i)).collect::<Vec<_>>());
            for (f, p) in inputs.iter_mut().zip(priors.into_priors()) {
                f.prior = Some(p);
            }
        } else if inputs.iter().any(|f| f.prior.is_none()) {
            return Err(CliError::config("mono mode needs a prior directory or --synthetic-prior"));
        }
    }

    let start = Instant::now();
    let out = slam::run(&inputs, &k, &config, tree)?;
    let wall_seconds = start.elapsed().as_secs_f64();

    std::fs::create_dir_all(&a.out)?;
    write_trajectory(&a.out.join(TRAJECTORY_FILE), &out.state.trajectory)?;
    out.state.map.save(&a.out.join(MAP_FILE))?;
    write_json(&a.out.join(METRICS_FILE), &out.metrics)?;
    write_json(
        &a.out.join(TRACES_FILE),
        &Traces {
            tracking: out.state.track_traces.clone(),
            mapping: out.state.map_traces.clone(),
        },
    )?;
    let tree_copy = match &tree_path {
        Some(p) if config.semantics => {
            std::fs::copy(p, a.out.join(TREE_FILE))?;
            Some(TREE_FILE.to_string())
        }
        _ => None,
    };
    let mut image_sets = Vec::new();
    if config.mode == SlamMode::Mono {
        for set in partition_frames(n, &config.mono.image_sets).map_err(|e| CliError::config(e.to_string()))? {
            let est: Vec<AffineAlignment> = set.iter().filter_map(|&i| out.state.alignments[i]).collect();
            let m = est.len().max(1) as f64;
            image_sets.push(ImageSetReport {
                estimated: AffineAlignment {
                    lambda: est.iter().map(|a| a.lambda).sum::<f64>() / m,
                    tau: est.iter().map(|a| a.tau).sum::<f64>() / m,
                },
                injected: injected.as_ref().map(|inj| inj[set[0]]),
                frames: set,
            });
        }
    }
    let dataset_path = std::fs::canonicalize(&a.dataset).unwrap_or_else(|_| a.dataset.clone());
    write_json(
        &a.out.join(RUN_FILE),
        &RunRecord {
            dataset: dataset_path,
            frames: n,
            config,
            tree: tree_copy,
            timing: out.state.timing.clone(),
            wall_seconds,
            image_sets,
        },
    )?;
    println!("{}", serde_json::to_string(&out.metrics).map_err(|e| CliError::generic(e.to_string()))?);
    Ok(())
}
