//! End-to-end exit criteria. Each test prints one PASS/FAIL line.

#[path = "../../core/tests/support/mod.rs"]
mod core_support;
#[path = "../../taxonomy/tests/support/mod.rs"]
mod taxonomy_support;

use std::path::PathBuf;
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use hiersplat_core::eval::{self, Metrics};
use hiersplat_core::frame::Frame;
use hiersplat_core::gaussian_map::storage_report;
use hiersplat_core::losses::{
    color_loss_prime, inter_level_loss, intra_level_loss, mapping_loss, tracking_loss, InterLevelDecoder,
    LabelTable, SemanticLossWeights, TrackMapWeights,
};
use hiersplat_core::mono_prior::{align_depth, PriorDepth};
use hiersplat_core::rasterizer::{render, RenderOptions};
use hiersplat_core::scene_synth::{generate, SceneSpec, Sequence};
use hiersplat_core::semantic_tree::{BinaryLayout, LayoutKind, OneHotLayout, SemanticCodec, SemanticTree};
use hiersplat_core::slam::{run, FrameInput, SlamConfig, SlamMode};
use hiersplat_core::mono_prior::SyntheticPriors;
use hiersplat_taxonomy::llm_client::{Bindings, MockClient, ReplayClient, TemplateName};
use hiersplat_taxonomy::tree_builder::{
    build_tree, critic_loop, validate_tree, BuilderConfig, GroupingResult, Provenance, SyntheticShapes,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, ok: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

fn workspace() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("..")
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut bad = Vec::new();
    for seed in 0..20u64 {
        let count = 1 + (seed as usize % 5);
        bad.extend(core_support::render_gradient_mismatches(seed, count, 8, 3).into_iter().map(|m| format!("scene {seed}: {m}")));
        bad.extend(decoder_mismatches(seed));
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        bad.is_empty() && secs < 60.0,
        format!("{} mismatches over 20 scenes in {secs:.1}s {:?}", bad.len(), bad.iter().take(3).collect::<Vec<_>>()),
    );
}

/// Decoder weights and its input through the inter-level loss.
fn decoder_mismatches(seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdec);
    let tree = Arc::new(SemanticTree::balanced(2, 2).unwrap());
    let codec = SemanticCodec::new(tree, LayoutKind::Onehot).unwrap();
    let table = LabelTable::new(&codec).unwrap();
    let mut dec = InterLevelDecoder::new(codec.width(), codec.class_count(), seed);
    // nudge biases so no hidden unit sits on the ReLU kink
    dec.b1.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    let pixels = 6;
    let h: Vec<f64> = (0..pixels * codec.width()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<u32> = (0..pixels).map(|_| rng.random_range(0..=4)).collect();
    let (_, gh, gd) = inter_level_loss(&h, &labels, &dec, &table).unwrap();
    let loss = |d: &InterLevelDecoder, h: &[f64]| inter_level_loss(h, &labels, d, &table).unwrap().0;
    let eps = 1e-5;
    let mut bad = Vec::new();
    let mut check = |name: String, a: f64, n: f64| {
        if !core_support::grad_close(a, n, 1e-3, 1e-6) {
            bad.push(format!("decoder {seed} {name}: analytic {a:e} numeric {n:e}"));
        }
    };
    macro_rules! each {
        ($field:ident) => {
            for i in 0..dec.$field.len() {
                let n = core_support::central_difference(eps, |e| {
                    let mut d = dec.clone();
                    d.$field[i] += e;
                    loss(&d, &h)
                });
                check(format!("{}[{i}]", stringify!($field)), gd.$field[i], n);
            }
        };
    }
    each!(w1);
    each!(b1);
    each!(w2);
    each!(b2);
    for i in 0..h.len() {
        let n = core_support::central_difference(eps, |e| {
            let mut hh = h.clone();
            hh[i] += e;
            loss(&dec, &hh)
        });
        check(format!("h[{i}]"), gh[i], n);
    }
    bad
}

#[test]
fn criterion_2_rasterizer_matches_brute_force() {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let count = 1 + (seed as usize * 7) % 50;
        let s = core_support::random_scene(seed + 1000, count, 16, 3);
        let r = render(&s.map, &s.pose, &s.k, &RenderOptions::exact());
        let o = core_support::brute_force_render(&s.map, &s.pose, &s.k);
        for (a, b) in [
            (&r.maps.color, &o.color),
            (&r.maps.depth, &o.depth),
            (&r.maps.silhouette, &o.silhouette),
            (&r.maps.semantic, &o.semantic),
        ] {
            for (x, y) in a.iter().zip(b.iter()) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    report(2, worst < 1e-5, format!("max per-pixel difference {worst:e} over 100 scenes"));
}

fn round_trip_failures(tree: &Arc<SemanticTree>) -> usize {
    let mut fails = 0;
    for kind in [LayoutKind::Flat, LayoutKind::Onehot, LayoutKind::Binary] {
        let codec = SemanticCodec::new(tree.clone(), kind).unwrap();
        for c in tree.class_ids() {
            let code = codec.encode(c).unwrap();
            let d = codec.decode(&code).unwrap();
            if d.class_id != c || d.nodes != tree.path_of(c).unwrap().0 {
                fails += 1;
            }
        }
    }
    fails
}

#[test]
fn criterion_3_codec_laws() {
    let load = |p: PathBuf| Arc::new(SemanticTree::load(&p).unwrap());
    let replica = load(workspace().join("core/fixtures/replica102_tree.json"));
    let trees = [
        load(workspace().join("core/fixtures/toy16_tree.json")),
        load(workspace().join("taxonomy/fixtures/toy12_tree.json")),
        replica.clone(),
        Arc::new(SemanticTree::balanced(2, 9).unwrap()),
        Arc::new(SemanticTree::balanced(8, 3).unwrap()),
        Arc::new(SemanticTree::balanced(3, 5).unwrap()),
    ];
    let mut leaves = 0;
    let mut fails = 0;
    for t in &trees {
        assert!(t.class_count() <= 512);
        leaves += t.class_count();
        fails += round_trip_failures(t);
    }
    let deep = SemanticTree::balanced(2, 10).unwrap();
    let deep_width = OneHotLayout::from_tree(&deep).total_width;
    let eight = SemanticTree::balanced(8, 1).unwrap();
    let bits = BinaryLayout::from_tree(&eight).per_level_bits[0];
    let rb = BinaryLayout::from_tree(&replica).total_width;
    let ro = OneHotLayout::from_tree(&replica).total_width;
    let ok = fails == 0 && deep_width == 20 && bits == 3 && replica.class_count() == 102 && replica.depth() == 5 && rb < ro && ro < 102;
    report(
        3,
        ok,
        format!(
            "{fails} round-trip failures over {leaves} leaves x 3 layouts; depth-10 binary tree one-hot width {deep_width}; n=8 -> {bits} bits; 102-class tree widths binary {rb} < one-hot {ro} < 102"
        ),
    );
}

struct RunSummary {
    metrics: Metrics,
    semantic_bytes: usize,
    extent: f64,
    seconds: f64,
}

fn toy_sequence(frames: usize) -> Sequence {
    generate(&SceneSpec::toy_room(0, 64, 64, frames)).unwrap()
}

fn inputs_of(seq: &Sequence) -> Vec<FrameInput> {
    seq.frames
        .iter()
        .enumerate()
        .map(|(i, f)| FrameInput {
            timestamp: i as f64,
            frame: f.frame.clone(),
            prior: None,
            gt_pose: Some(f.pose),
        })
        .collect()
}

fn rgbd_run(layout: LayoutKind) -> RunSummary {
    let seq = toy_sequence(50);
    let config = SlamConfig {
        layout,
        ..SlamConfig::quality()
    };
    let start = Instant::now();
    let out = run(&inputs_of(&seq), &seq.intrinsics, &config, Some(Arc::new(seq.tree.clone()))).unwrap();
    let gt: Vec<_> = seq.frames.iter().map(|f| f.pose).collect();
    RunSummary {
        metrics: out.metrics,
        semantic_bytes: storage_report(&out.state.map, 4).semantic_bytes,
        extent: eval::trajectory_extent(&gt),
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn cached(layout: LayoutKind) -> &'static RunSummary {
    static FLAT: OnceLock<RunSummary> = OnceLock::new();
    static ONEHOT: OnceLock<RunSummary> = OnceLock::new();
    static BINARY: OnceLock<RunSummary> = OnceLock::new();
    let cell = match layout {
        LayoutKind::Flat => &FLAT,
        LayoutKind::Onehot => &ONEHOT,
        LayoutKind::Binary => &BINARY,
    };
    cell.get_or_init(|| rgbd_run(layout))
}

#[test]
fn criterion_4_rgbd_convergence() {
    let r = cached(LayoutKind::Onehot);
    let m = &r.metrics;
    let ate = m.ate_rmse.unwrap();
    let ate_limit = 0.005 * r.extent * 100.0;
    let depth = m.depth_l1.unwrap();
    let miou = &m.miou_per_level;
    let finest = *miou.last().unwrap();
    let monotone = miou.windows(2).all(|w| w[0] >= w[1]);
    let ok = ate < ate_limit && depth < 1.0 && m.psnr > 28.0 && finest >= 90.0 && monotone && r.seconds < 900.0;
    report(
        4,
        ok,
        format!(
            "ATE {ate:.3} cm (limit {ate_limit:.3}), depth L1 {depth:.3} cm, PSNR {:.2} dB, mIoU coarse->fine {miou:.2?}, {:.0}s",
            m.psnr, r.seconds
        ),
    );
}

#[test]
fn criterion_5_hierarchical_vs_flat_parity() {
    let flat = cached(LayoutKind::Flat);
    let onehot = cached(LayoutKind::Onehot);
    let binary = cached(LayoutKind::Binary);
    let fine = |r: &RunSummary| *r.metrics.miou_per_level.last().unwrap();
    let (f, o, b) = (fine(flat), fine(onehot), fine(binary));
    let (sf, so, sb) = (flat.semantic_bytes, onehot.semantic_bytes, binary.semantic_bytes);
    let ok = (o - f).abs() <= 5.0 && (b - f).abs() <= 5.0 && sb < so && so < sf;
    report(
        5,
        ok,
        format!("finest mIoU flat {f:.2} one-hot {o:.2} binary {b:.2}; semantic bytes binary {sb} < one-hot {so} < flat {sf}"),
    );
}

#[test]
fn criterion_6_monocular_alignment() {
    let seq = toy_sequence(1);
    let depth = seq.frames[0].frame.depth.clone().unwrap();
    let silhouette = vec![1.0; depth.len()];
    let mean_depth = depth.iter().sum::<f64>() / depth.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    let (mut exact_err, mut noisy_lambda, mut noisy_tau) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let lambda = rng.random_range(0.3..3.0);
        let tau = rng.random_range(-0.5..0.5);
        let clean: Vec<f64> = depth.iter().map(|d| (d - tau) / lambda).collect();
        let a = align_depth(&PriorDepth::new(0, clean.clone()), &depth, &silhouette, 0.5).unwrap();
        exact_err = exact_err.max((a.lambda - lambda).abs()).max((a.tau - tau).abs());
        let noisy: Vec<f64> = clean
            .iter()
            .map(|p| p * (1.0 + 0.01 * rand_distr::Distribution::<f64>::sample(&normal, &mut rng)))
            .collect();
        let a = align_depth(&PriorDepth::new(0, noisy), &depth, &silhouette, 0.5).unwrap();
        noisy_lambda = noisy_lambda.max((a.lambda - lambda).abs() / lambda);
        noisy_tau = noisy_tau.max((a.tau - tau).abs() / mean_depth);
    }

    let frames = 30;
    let seq = toy_sequence(frames);
    let config = SlamConfig {
        mode: SlamMode::Mono,
        ..SlamConfig::quality()
    };
    let depths: Vec<Vec<f64>> = seq.frames.iter().map(|f| f.frame.depth.clone().unwrap()).collect();
    let priors = SyntheticPriors::new(&depths, &config.mono.image_sets, 0.01, 6).unwrap().into_priors();
    let mut inputs = inputs_of(&seq);
    for (f, p) in inputs.iter_mut().zip(priors) {
        f.prior = Some(p);
    }
    let out = run(&inputs, &seq.intrinsics, &config, Some(Arc::new(seq.tree.clone()))).unwrap();
    let gt: Vec<_> = seq.frames.iter().map(|f| f.pose).collect();
    let extent = eval::trajectory_extent(&gt);
    let ate = out.metrics.ate_rmse.unwrap();
    let limit = 0.02 * extent * 100.0;
    let ok = exact_err < 1e-9 && noisy_lambda < 0.02 && noisy_tau < 0.02 && ate < limit;
    report(
        6,
        ok,
        format!(
            "noiseless error {exact_err:e}; 1% noise: lambda {:.3}%, tau {:.3}% of mean depth; mono ATE {ate:.3} cm (limit {limit:.3})",
            100.0 * noisy_lambda,
            100.0 * noisy_tau
        ),
    );
}

#[test]
fn criterion_7_tree_builder() {
    let fixtures = workspace().join("taxonomy/fixtures");
    let classes = taxonomy_support::toy_classes();
    let replay = ReplayClient::load(&fixtures.join("toy12_transcript.json")).unwrap();
    let out = build_tree(&classes, &BuilderConfig::default(), &replay, &SyntheticShapes::new(7), 7).unwrap();
    let golden = std::fs::read_to_string(fixtures.join("toy12_tree.json")).unwrap();
    let identical = out.document.to_json() == golden && out.report.is_empty();

    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let proposal = GroupingResult {
        groups: vec![("small".into(), s(&["cup", "plate"])), ("large".into(), s(&["sofa"]))],
        provenance: Provenance::Size,
    };
    let shown = vec![
        ("small".to_string(), s(&["cup", "plate"])),
        ("large".to_string(), s(&["sofa"])),
        ("unassigned".to_string(), s(&["bed"])),
    ];
    let mock = MockClient::new().respond(
        TemplateName::Validator,
        &Bindings::clusters(&shown),
        r#"{"small": ["cup", "plate"], "large": ["sofa", "bed"]}"#,
    );
    let converged = critic_loop(proposal, &s(&["cup", "plate", "sofa", "bed"]), &mock, 5)
        .map(|g| g.members().count() == 4)
        .unwrap_or(false);

    let doc = hiersplat_core::semantic_tree::TreeDocument::from_json(&golden).unwrap();
    let mut caught = 0;
    let suite = taxonomy_support::mutation_suite();
    for (_, mutate, flagged) in &suite {
        let mut d = doc.clone();
        let mut c = classes.clone();
        mutate(&mut d, &mut c);
        let r = validate_tree(&d, &c);
        if !r.is_empty() && flagged(&r) {
            caught += 1;
        }
    }
    report(
        7,
        identical && converged && caught == suite.len() && suite.len() == 10,
        format!("golden tree identical: {identical}; critic converged: {converged}; mutations flagged {caught}/{}", suite.len()),
    );
}

#[test]
fn criterion_8_loss_sanity() {
    let seq = toy_sequence(1);
    let frame: &Frame = &seq.frames[0].frame;
    let tree = Arc::new(seq.tree.clone());
    let (w, h) = (frame.width, frame.height);
    let labels = frame.labels.clone().unwrap();

    // a render that reproduces the frame exactly
    let mut maps = hiersplat_core::rasterizer::RenderedMaps::zeros(w, h, 0);
    maps.color = frame.color.clone();
    maps.depth = frame.depth.clone().unwrap();
    maps.silhouette = vec![1.0; w * h];
    let weights = TrackMapWeights::default();
    let track = tracking_loss(&maps, frame, &weights).unwrap().value;
    let (color, _) = color_loss_prime(&maps.color, &frame.color, w, h, weights.lambda_ssim).unwrap();
    let map = mapping_loss(&maps, frame, &weights, None).unwrap().value;

    // semantic terms with confident correct logits
    let big = 40.0;
    let mut sem_worst = 0.0f64;
    for kind in [LayoutKind::Flat, LayoutKind::Onehot, LayoutKind::Binary] {
        let codec = SemanticCodec::new(tree.clone(), kind).unwrap();
        let table = LabelTable::new(&codec).unwrap();
        let hw = codec.width();
        let mut hm = vec![0.0; labels.len() * hw];
        for (p, &l) in labels.iter().enumerate() {
            if l == 0 {
                continue;
            }
            let code = codec.encode(l).unwrap();
            for (i, v) in code.iter().enumerate() {
                hm[p * hw + i] = big * (2.0 * v - 1.0);
            }
        }
        sem_worst = sem_worst.max(intra_level_loss(&hm, &labels, &codec, &table).unwrap().0);
        if kind == LayoutKind::Flat {
            let lift = InterLevelDecoder::identity_lift(hw);
            let pos: Vec<f64> = hm.iter().map(|v| v.max(0.0)).collect();
            sem_worst = sem_worst.max(inter_level_loss(&pos, &labels, &lift, &table).unwrap().0);
        }
    }

    // uniform logits give the log of each level's width
    let codec = SemanticCodec::new(tree.clone(), LayoutKind::Onehot).unwrap();
    let table = LabelTable::new(&codec).unwrap();
    let widths = &codec.one_hot_layout().per_level_width;
    let expected: f64 = widths.iter().map(|&n| (n as f64).ln()).sum();
    let uniform = intra_level_loss(&vec![0.3; labels.len() * codec.width()], &labels, &codec, &table).unwrap().0;

    let sw = SemanticLossWeights::default();
    let schedule_ok = sw.schedule(14).1 == 0.0 && sw.schedule(15).1 > 0.0;

    let zero = track.abs().max(color.abs()).max(map.abs()).max(sem_worst);
    let ok = zero < 1e-6 && (uniform - expected).abs() < 1e-6 && schedule_ok;
    report(
        8,
        ok,
        format!(
            "largest loss at ground truth {zero:e}; uniform intra {uniform:.9} vs sum ln n_l {expected:.9} (widths {widths:?}); omega2 off at 14, on at 15: {schedule_ok}"
        ),
    );
}

#[test]
fn criterion_9_determinism() {
    let bin = env!("CARGO_BIN_EXE_hiersplat");
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let status = Command::new(bin)
        .args(["synth", "--frames", "10", "--out"])
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = Command::new(bin)
            .args(["slam", "run", "--seed", "11", "--dataset"])
            .arg(&data)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        outputs.push(std::fs::read(out.join("trajectory.txt")).unwrap());
    }
    let same = outputs[0] == outputs[1] && !outputs[0].is_empty();
    report(9, same, format!("trajectory files of two runs identical: {same} ({} bytes)", outputs[0].len()));
}
