use std::path::Path;
use std::sync::Arc;

use hiersplat_core::datasets::{read_trajectory, Dataset};
use hiersplat_core::gaussian_map::GaussianMap;
use hiersplat_core::geometry::{Intrinsics, RigidPose};
use hiersplat_core::semantic_tree::{SemanticCodec, SemanticTree};
use hiersplat_core::slam::{evaluate, DatasetSource, FrameInput, FrameSource};

use crate::error::{CliError, CliResult};
use crate::slam_cmd::{RunRecord, MAP_FILE, RUN_FILE, TRAJECTORY_FILE};
use crate::EvalArgs;

/// A finished run loaded back from disk.
pub struct LoadedRun {
    pub record: RunRecord,
    pub map: GaussianMap,
    pub trajectory: Vec<(f64, RigidPose)>,
    pub codec: Option<SemanticCodec>,
    pub frames: Vec<FrameInput>,
    pub k: Intrinsics,
}

pub fn load_run(run: &Path, gt: Option<&Path>) -> CliResult<LoadedRun> {
    let record_path = run.join(RUN_FILE);
    if !record_path.exists() {
        return Err(CliError::generic(format!("{} has no {RUN_FILE}; not a run directory", run.display())));
    }
    let record: RunRecord = serde_json::from_str(&std::fs::read_to_string(&record_path)?)
        .map_err(|e| CliError::generic(format!("{}: {e}", record_path.display())))?;
    let map = GaussianMap::load(&run.join(MAP_FILE), record.config.layout)?;
    let trajectory = read_trajectory(&run.join(TRAJECTORY_FILE))?;
    let codec = match &record.tree {
        Some(t) => {
            let tree = Arc::new(SemanticTree::load(&run.join(t))?);
            Some(SemanticCodec::new(tree, record.config.layout)?)
        }
        None => None,
    };
    let root = gt.map(Path::to_path_buf).unwrap_or_else(|| record.dataset.clone());
    let dataset = Dataset::open(&root)?;
    let k = dataset.manifest().intrinsics;
    let source = DatasetSource::new(dataset)?;
    let n = record.frames.min(source.len()).min(trajectory.len());
    let frames = (0..n).map(|i| source.get(i)).collect::<Result<Vec<_>, _>>()?;
    Ok(LoadedRun {
        record,
        map,
        trajectory,
        codec,
        frames,
        k,
    })
}

pub fn run(a: &EvalArgs) -> CliResult<()> {
    let r = load_run(&a.run, a.gt.as_deref())?;
    let metrics = evaluate(
        &r.map,
        &r.trajectory[..r.frames.len()],
        &r.frames,
        &r.k,
        r.codec.as_ref(),
        &r.record.config.render,
        r.record.config.eval_stride,
        &r.record.timing,
    )?;
    let text = serde_json::to_string_pretty(&metrics).map_err(|e| CliError::generic(e.to_string()))?;
    println!("{text}");
    if let Some(out) = &a.out {
        std::fs::write(out, text + "\n")?;
    }
    Ok(())
}
