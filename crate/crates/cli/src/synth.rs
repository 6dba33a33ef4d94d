use hiersplat_core::datasets::write_sequence;
use hiersplat_core::scene_synth::{generate, SceneSpec};

use crate::error::{CliError, CliResult};
use crate::SynthArgs;

/// Depth quantization step of the written dataset, in meters.
const DEPTH_SCALE: f64 = 1e-4;

pub fn run(a: &SynthArgs) -> CliResult<()> {
    let spec = SceneSpec::toy_room(a.seed, a.width, a.height, a.frames);
    let seq = generate(&spec).map_err(|e| CliError::config(e.to_string()))?;
    std::fs::create_dir_all(&a.out)?;
    write_sequence(&a.out, &seq, DEPTH_SCALE, None)?;
    println!("wrote {} frames to {}", seq.frames.len(), a.out.display());
    Ok(())
}
