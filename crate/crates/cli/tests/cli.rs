use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hiersplat"));
    c.env_remove("HIERSPLAT_LLM_KEY").env_remove("RUST_LOG");
    c
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn taxonomy_fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../taxonomy/fixtures")
}

fn run(c: &mut Command) -> Output {
    c.output().expect("binary runs")
}

#[test]
fn help_text_is_stable() {
    for (args, file) in [
        (vec![], "help.txt"),
        (vec!["tree"], "help_tree.txt"),
        (vec!["tree", "build"], "help_tree_build.txt"),
        (vec!["slam"], "help_slam.txt"),
        (vec!["slam", "run"], "help_slam_run.txt"),
        (vec!["eval"], "help_eval.txt"),
        (vec!["plot"], "help_plot.txt"),
        (vec!["synth"], "help_synth.txt"),
    ] {
        let out = run(bin().args(&args).arg("--help"));
        assert!(out.status.success());
        let golden = std::fs::read_to_string(fixtures().join(file)).unwrap();
        assert_eq!(String::from_utf8(out.stdout).unwrap(), golden, "{file}");
    }
}

#[test]
fn tree_build_replays_the_recorded_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("tree.json");
    let out = run(bin()
        .args(["tree", "build", "--synthetic-shapes", "--seed", "7", "--classes"])
        .arg(fixtures().join("toy12_classes.txt"))
        .arg("--mock")
        .arg(taxonomy_fixtures().join("toy12_transcript.json"))
        .arg("--out")
        .arg(&out_path));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let got = std::fs::read_to_string(&out_path).unwrap();
    let golden = std::fs::read_to_string(taxonomy_fixtures().join("toy12_tree.json")).unwrap();
    assert_eq!(got, golden);
}

#[test]
fn missing_credential_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin()
        .args(["tree", "build", "--synthetic-shapes", "--classes"])
        .arg(fixtures().join("toy12_classes.txt"))
        .arg("--out")
        .arg(dir.path().join("t.json")));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("HIERSPLAT_LLM_KEY"));
}

fn synth(dir: &Path, frames: usize) -> PathBuf {
    let data = dir.join("data");
    let out = run(bin()
        .args(["synth", "--width", "32", "--height", "32", "--frames"])
        .arg(frames.to_string())
        .arg("--out")
        .arg(&data));
    assert!(out.status.success());
    data
}

#[test]
fn layout_without_any_tree_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 2);
    std::fs::remove_file(data.join("tree.json")).unwrap();
    let manifest = data.join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    m.as_object_mut().unwrap().remove("tree");
    std::fs::write(&manifest, m.to_string()).unwrap();
    let out = run(bin()
        .args(["slam", "run", "--layout", "binary", "--dataset"])
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("run")));
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn mono_without_priors_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 2);
    let out = run(bin()
        .args(["slam", "run", "--mode", "mono", "--dataset"])
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("run")));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn run_eval_and_plot_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 4);
    let run_dir = dir.path().join("run");
    let out = run(bin().args(["slam", "run", "--dataset"]).arg(&data).arg("--out").arg(&run_dir));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["run.json", "trajectory.txt", "map.hspp", "metrics.json", "traces.json", "tree.json"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    let stored: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("metrics.json")).unwrap()).unwrap();

    let eval_out = dir.path().join("eval.json");
    let out = run(bin().arg("eval").arg("--run").arg(&run_dir).arg("--gt").arg(&data).arg("--out").arg(&eval_out));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let again: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&eval_out).unwrap()).unwrap();
    for key in ["ate_rmse", "depth_l1", "psnr"] {
        let (a, b) = (stored[key].as_f64().unwrap(), again[key].as_f64().unwrap());
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{key}: {a} vs {b}");
    }
    assert_eq!(stored["miou_per_level"].as_array().unwrap().len(), 3);

    let plots = dir.path().join("plots");
    let out = run(bin()
        .arg("plot")
        .arg("--run")
        .arg(&run_dir)
        .arg("--gt")
        .arg(&data)
        .args(["--level", "2", "--frame", "3", "--out"])
        .arg(&plots));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let n = std::fs::read_dir(&plots).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(n, 4);
}

#[test]
fn eval_on_an_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin().arg("eval").arg("--run").arg(dir.path()).arg("--gt").arg(dir.path()));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
