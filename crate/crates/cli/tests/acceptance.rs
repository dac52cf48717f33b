//! Acceptance gate. Prints one `[PASS]`/`[FAIL]` line per criterion. Set
//! `SGTA_ACCEPTANCE_STRICT` to exit nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use sgta::beliefmap::{decode_peaks, encode_target, render_belief, ChannelMode, HeadConfig, KeypointSet2D, Resolution};
use sgta::fusion::FusionWeights;
use sgta::geometry::{AffineMap2D, CameraIntrinsics, PoseSE3};
use sgta::gradcheck::{check_attention_inputs, check_loss_gradients, check_weight_group};
use sgta::kinematics::{fk_keypoints, JointConfig, KeypointSet3D, KinematicChain};
use sgta::metrics::{add_error, auc_below, MetricsReport, ADD_THRESHOLD_MM, PCK_THRESHOLD_PX};
use sgta::pipeline::{track_frame, track_sequence, AblationFlags, FrameResult, TrackerConfig, TrackerState};
use sgta::simulator::{gen_dataset, gen_sequence, project_keypoints, sample_camera, FrameRecord, OcclusionBurst, SimConfig};
use sgta::solver::{correspondences, refine_correspondences, refine_lm, RansacConfig};
use sgta_cli::{multiframe_sweep, run, run_ablation, smoothed_medians, sweep_csv, Cli, MultiframeConfig};

// criterion 1
const EXACT_TRIALS: usize = 500;
const EXACT_TRANSLATION_M: f64 = 1e-6;
const EXACT_ROTATION_RAD: f64 = 1e-6;
const EXACT_RUNTIME_S: f64 = 30.0;
// criterion 2
const REFINE_TRIALS: usize = 1000;
const REFINE_NOISE_PX: f64 = 2.0;
const REFINE_OUTLIER_PX: f64 = 20.0;
const REFINE_WIN_RATE: f64 = 0.9;
const REFINE_RUNTIME_S: f64 = 60.0;
// criterion 3
const MULTIFRAME_TRIALS: usize = 300;
const MULTIFRAME_NOISE_PX: f64 = 2.0;
const MULTIFRAME_SWEEP: [usize; 6] = [1, 2, 5, 10, 15, 20];
const MULTIFRAME_RATIO: f64 = 0.25;
const MULTIFRAME_MONOTONE_TOL: f64 = 0.10;
// criterion 4
const GRAD_SAMPLES: usize = 50;
const GRAD_TOL_FUSION: f64 = 1e-4;
const GRAD_TOL_LOSS: f64 = 1e-6;
// criterion 5
const ROUNDTRIP_SETS: usize = 10_000;
const ROUNDTRIP_TOL_PX: f64 = 1e-6;
const KERNEL_TOL: f64 = 1e-12;
// criterion 6
const AUC_SAMPLES: usize = 100_000;
const AUC_TOL: f64 = 0.01;
// criterion 7
const ABLATION_VIDEOS: usize = 100;
const ABLATION_TIE: f64 = 0.05;
// criterion 9
const OCCLUSION_RUNS: usize = 100;
const OCCLUSION_BURST: OcclusionBurst = OcclusionBurst {
    start: 10,
    end: 15,
    prob: 0.5,
};
const RECOVERY_WINDOW: usize = 5;
const RECOVERY_RATE: f64 = 0.8;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_joint_config(chain: &KinematicChain, rng: &mut ChaCha8Rng, spread: f64) -> JointConfig {
    let nominal = chain.nominal_config();
    JointConfig::new(nominal.angles.iter().map(|a| a + rng.random_range(-spread..spread)).collect())
}

/// A camera, chain configuration and its exact projections with every
/// keypoint inside the image.
fn visible_view(
    chain: &KinematicChain,
    rng: &mut ChaCha8Rng,
    spread: f64,
) -> (CameraIntrinsics, PoseSE3, KeypointSet3D, KeypointSet2D) {
    let sim = SimConfig::default();
    loop {
        let (k, pose) = sample_camera(&sim, rng);
        let q = random_joint_config(chain, rng, spread);
        let kp3d = fk_keypoints(chain, &q).unwrap();
        let kp2d = project_keypoints(&k, &pose, &kp3d);
        if kp2d.in_frame.iter().all(|&v| v) {
            return (k, pose, kp3d, kp2d);
        }
    }
}

/// Whether two keypoints fall into one head cell, where the shared offset
/// field can hold only one of them.
fn shares_cell(points: &[Vector2<f64>], k: &CameraIntrinsics, cfg: &HeadConfig) -> bool {
    let m = AffineMap2D::letterbox(k.width, k.height, cfg.input_size as u32);
    let cells: Vec<(i64, i64)> = points
        .iter()
        .map(|p| {
            let q = m.apply(p) / cfg.downsample as f64;
            (q.x.floor() as i64, q.y.floor() as i64)
        })
        .collect();
    (0..cells.len()).any(|i| cells[..i].contains(&cells[i]))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let tc = TrackerConfig::default();
    let weights = FusionWeights::init(&tc.fusion, 1);
    let (mut worst_t, mut worst_r) = (0.0f64, 0.0f64);
    let (mut failures, mut collided) = (0, 0);
    for trial in 0..EXACT_TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000 + trial as u64);
        let chain = KinematicChain::random(&mut rng, 7, 7);
        let (k, pose, kp3d, kp2d) = visible_view(&chain, &mut rng, 1.0);
        let collides = shares_cell(&kp2d.points, &k, tc.head());
        let frame = FrameRecord {
            video: trial,
            frame: 0,
            q: JointConfig::zeros(7),
            pose,
            kp3d,
            kp2d_gt: kp2d.clone(),
            kp2d_det: kp2d,
            visible: vec![true; 7],
        };
        let (r, _) = track_frame(TrackerState::new(&tc), &frame, &k, AblationFlags::default(), &weights, &tc).unwrap();
        let (et, er) = r
            .pose
            .map_or((f64::INFINITY, f64::INFINITY), |p| (p.translation_distance(&pose), p.rotation_distance(&pose)));
        worst_t = worst_t.max(et);
        worst_r = worst_r.max(er);
        if !(et < EXACT_TRANSLATION_M && er < EXACT_ROTATION_RAD) {
            failures += 1;
            if collides {
                collided += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures == 0 && worst_t < EXACT_TRANSLATION_M && worst_r < EXACT_ROTATION_RAD && secs < EXACT_RUNTIME_S;
    outcome(
        pass,
        format!(
            "{EXACT_TRIALS} zero-noise frames: max translation error {worst_t:.2e} m (< {EXACT_TRANSLATION_M:e}), \
             max rotation error {worst_r:.2e} rad (< {EXACT_ROTATION_RAD:e}), {failures} trials over tolerance \
             ({collided} with two keypoints in one head cell), \
             runtime {secs:.1} s (< {EXACT_RUNTIME_S} s)"
        ),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let chain = KinematicChain::default_arm();
    let cfg = RansacConfig::default();
    let noise = Normal::new(0.0, REFINE_NOISE_PX).unwrap();
    let (mut sum_init, mut sum_weighted) = (0.0, 0.0);
    let mut wins = 0;
    for trial in 0..REFINE_TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(2_000 + trial as u64);
        let (k, pose, kp3d, mut det) = visible_view(&chain, &mut rng, 0.5);
        for p in &mut det.points {
            *p += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
        }
        let bad = rng.random_range(0..det.len());
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let truth = project_keypoints(&k, &pose, &kp3d).points[bad];
        det.points[bad] = truth + REFINE_OUTLIER_PX * Vector2::new(angle.cos(), angle.sin());
        let corr = correspondences(&det, &kp3d).unwrap();
        let weighted = refine_correspondences(&corr, &k, &cfg).unwrap();
        let uniform = refine_lm(&weighted.initial_pose, &corr, &k, &vec![1.0; corr.len()]).unwrap();
        let add_w = add_error(&weighted.pose, &pose, &kp3d);
        sum_init += add_error(&weighted.initial_pose, &pose, &kp3d);
        sum_weighted += add_w;
        if add_w <= add_error(&uniform.pose, &pose, &kp3d) {
            wins += 1;
        }
    }
    let n = REFINE_TRIALS as f64;
    let (mean_init, mean_weighted) = (sum_init / n, sum_weighted / n);
    let rate = wins as f64 / n;
    let secs = start.elapsed().as_secs_f64();
    let pass = mean_weighted <= mean_init && rate >= REFINE_WIN_RATE && secs < REFINE_RUNTIME_S;
    outcome(
        pass,
        format!(
            "mean ADD weighted {mean_weighted:.1} mm vs RANSAC initial {mean_init:.1} mm; \
             weighted <= uniform in {:.1}% of {REFINE_TRIALS} trials (>= {:.0}%); runtime {secs:.1} s (< {REFINE_RUNTIME_S} s)",
            100.0 * rate,
            100.0 * REFINE_WIN_RATE
        ),
    )
}

fn parse_medians(csv: &str) -> BTreeMap<usize, f64> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|&h| h == "median_add_mm").unwrap();
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[col].parse().unwrap())
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let sim = SimConfig {
        videos: MULTIFRAME_TRIALS,
        frames_per_video: 20,
        detector_noise_sigma: MULTIFRAME_NOISE_PX,
        outlier_prob: 0.0,
        occlusion_prob: 0.0,
        seed: 3_000,
        ..SimConfig::default()
    };
    let videos = gen_dataset(&sim, &KinematicChain::default_arm()).unwrap();
    let cfg = MultiframeConfig {
        positions: 20,
        sweep: MULTIFRAME_SWEEP.to_vec(),
        max_combinations: 1,
    };
    let rows = multiframe_sweep(&videos, &cfg, &RansacConfig::default(), 3_001).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("multiframe.csv");
    fs::write(&path, sweep_csv(&rows)).unwrap();
    let medians = parse_medians(&fs::read_to_string(&path).unwrap());
    let (m1, m20) = (medians[&1], medians[&20]);
    let smooth = smoothed_medians(&rows);
    let monotone = smooth.windows(2).all(|w| w[1] <= w[0] * (1.0 + MULTIFRAME_MONOTONE_TOL));
    let pass = m20 <= m1 && m20 < MULTIFRAME_RATIO * m1 && monotone;
    let listing: Vec<String> = medians.iter().map(|(l, m)| format!("l={l}:{m:.1}")).collect();
    outcome(
        pass,
        format!(
            "median ADD mm {}; l=20/l=1 ratio {:.3} (< {MULTIFRAME_RATIO}); smoothed medians non-increasing within {:.0}%: {monotone}",
            listing.join(" "),
            m20 / m1,
            100.0 * MULTIFRAME_MONOTONE_TOL
        ),
    )
}

fn criterion_4() -> Outcome {
    let groups = [
        ("attention", check_weight_group("attention", true, GRAD_SAMPLES, 41)),
        ("mlp(tca)", check_weight_group("mlp", true, GRAD_SAMPLES, 42)),
        ("mlp(concat)", check_weight_group("mlp", false, GRAD_SAMPLES, 43)),
        ("encoder", check_weight_group("encoder", true, GRAD_SAMPLES, 44)),
        ("decoder", check_weight_group("decoder", true, GRAD_SAMPLES, 45)),
        ("attention inputs", check_attention_inputs(GRAD_SAMPLES, 46)),
    ];
    let (belief, offset) = check_loss_gradients(GRAD_SAMPLES, 47);
    let fusion_ok = groups.iter().all(|(_, e)| *e < GRAD_TOL_FUSION);
    let loss_ok = belief < GRAD_TOL_LOSS && offset < GRAD_TOL_LOSS;
    let listing: Vec<String> = groups.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(
        fusion_ok && loss_ok,
        format!(
            "{GRAD_SAMPLES} coordinates each; worst relative error {} (< {GRAD_TOL_FUSION:e}); L_B {belief:.1e}, L_off {offset:.1e} (< {GRAD_TOL_LOSS:e})",
            listing.join(", ")
        ),
    )
}

fn criterion_5() -> Outcome {
    let cfg = HeadConfig::default();
    let k = CameraIntrinsics::default_vga();
    let m = AffineMap2D::letterbox(k.width, k.height, cfg.input_size as u32);
    let mut rng = ChaCha8Rng::seed_from_u64(5_000);
    let mut worst = 0.0f64;
    for _ in 0..ROUNDTRIP_SETS {
        // the offset field is shared across channels, so one keypoint per cell
        let raw = loop {
            let pts: Vec<Vector2<f64>> = (0..cfg.keypoints)
                .map(|_| Vector2::new(rng.random_range(0.0..k.width as f64), rng.random_range(0.0..k.height as f64)))
                .collect();
            if !shares_cell(&pts, &k, &cfg) {
                break KeypointSet2D::new(pts);
            }
        };
        let head = encode_target(&raw.mapped(&m, None), &cfg);
        let back = decode_peaks(&head, &m, (k.width, k.height)).unwrap();
        for (a, b) in raw.points.iter().zip(&back.points) {
            worst = worst.max((a - b).norm());
        }
    }
    let probe = KeypointSet2D::new(vec![Vector2::new(100.0, 100.0)]);
    let map = render_belief(&probe, &cfg, Resolution::Full, ChannelMode::Single);
    let kernel = map.get(0, 100, 102);
    let kernel_err = (kernel - (-0.5f64).exp()).abs();
    outcome(
        worst < ROUNDTRIP_TOL_PX && kernel_err < KERNEL_TOL,
        format!(
            "{ROUNDTRIP_SETS} sets: max round-trip error {worst:.2e} px (< {ROUNDTRIP_TOL_PX:e}); \
             kernel at 2 px {kernel:.15} vs exp(-0.5), error {kernel_err:.1e} (< {KERNEL_TOL:e})"
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6_000);
    let uniform: Vec<f64> = (0..AUC_SAMPLES).map(|_| rng.random_range(0.0..PCK_THRESHOLD_PX)).collect();
    let auc_uniform = auc_below(&uniform, PCK_THRESHOLD_PX).unwrap();
    let auc_zero = auc_below(&vec![0.0; 1000], ADD_THRESHOLD_MM).unwrap();
    let report = MetricsReport::from_errors(&[1.0], &[1.0]);
    let thresholds = PCK_THRESHOLD_PX == 12.0
        && ADD_THRESHOLD_MM == 60.0
        && report.pck_threshold_px == 12.0
        && report.add_threshold_mm == 60.0;
    outcome(
        (auc_uniform - 0.5).abs() < AUC_TOL && auc_zero == 1.0 && thresholds,
        format!(
            "uniform AUC {auc_uniform:.5} at N={AUC_SAMPLES} (|x-0.5| < {AUC_TOL}); all-zero AUC {auc_zero}; \
             thresholds {PCK_THRESHOLD_PX} px / {ADD_THRESHOLD_MM} mm"
        ),
    )
}

fn criterion_7() -> Outcome {
    let sim = SimConfig {
        videos: ABLATION_VIDEOS,
        seed: 7_000,
        ..SimConfig::default()
    };
    let videos = gen_dataset(&sim, &KinematicChain::default_arm()).unwrap();
    let tc = TrackerConfig {
        run_network: false,
        ..TrackerConfig::default()
    };
    let weights = FusionWeights::init(&tc.fusion, 7_001);
    let rows = run_ablation(&videos, &weights, &tc).unwrap();
    let means: Vec<f64> = rows.iter().map(|r| r.mean_add_mm.unwrap_or(f64::INFINITY)).collect();
    let ordered = means.windows(2).all(|w| w[0] <= w[1] * (1.0 + ABLATION_TIE));
    let listing: Vec<String> = rows
        .iter()
        .zip(&means)
        .map(|(r, m)| format!("{} {m:.1} mm ({} failed)", r.name, r.report.n_failed))
        .collect();
    outcome(
        ordered,
        format!(
            "mean ADD over {} frames: {}; ordering holds with {:.0}% ties: {ordered}",
            rows[0].report.n_frames,
            listing.join(", "),
            100.0 * ABLATION_TIE
        ),
    )
}

fn data_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_none_or(|e| e != "log"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn criterion_8() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let d = |name: &str| root.path().join(name).to_string_lossy().into_owned();
    let data = format!("{}/dataset.jsonl", d("gen"));
    let results = format!("{}/results.jsonl", d("track"));
    let commands: Vec<Vec<String>> = vec![
        vec!["gen", "--videos", "2", "--frames", "20", "--seed", "11", "--out", &d("gen")],
        vec!["track", "--data", &data, "--seed", "11", "--out", &d("track")],
        vec!["eval", "--results", &results, "--out", &d("eval")],
        vec![
            "multiframe", "--data", &data, "--seed", "11", "--sweep", "1,10,20", "--max-combinations", "3",
            "--out", &d("multiframe"),
        ],
        vec!["ablate", "--data", &data, "--seed", "11", "--skip-network", "--out", &d("ablate")],
    ]
    .into_iter()
    .map(|c| c.into_iter().map(String::from).collect())
    .collect();
    let run_all = |force: bool| {
        let mut outputs = BTreeMap::new();
        for c in &commands {
            let args = std::iter::once("sgta".to_string())
                .chain(c.iter().cloned())
                .chain(force.then(|| "--force".to_string()));
            run(Cli::try_parse_from(args).unwrap()).unwrap();
            outputs.insert(c[0].clone(), data_files(&root.path().join(&c[0])));
        }
        outputs
    };
    let first = run_all(false);
    let second = run_all(true);
    let mut compared = 0;
    let mut differing = Vec::new();
    for (cmd, a) in &first {
        let b = &second[cmd];
        if a.is_empty() || a.keys().ne(b.keys()) {
            differing.push(format!("{cmd}/ (file set)"));
        }
        for (name, bytes) in a {
            compared += 1;
            if b.get(name) != Some(bytes) {
                differing.push(format!("{cmd}/{name}"));
            }
        }
    }
    outcome(
        differing.is_empty(),
        format!(
            "gen, track, eval, multiframe, ablate rerun with the same seed: {compared} data files compared, differing: [{}]",
            differing.join(", ")
        ),
    )
}

fn recovered(results: &[FrameResult], level: f64) -> bool {
    let first = OCCLUSION_BURST.end + 1;
    results[first..first + RECOVERY_WINDOW].iter().any(|r| r.add_mm <= level)
}

fn criterion_9() -> Outcome {
    let chain = KinematicChain::default_arm();
    let tc = TrackerConfig {
        run_network: false,
        ..TrackerConfig::default()
    };
    let weights = FusionWeights::init(&tc.fusion, 9_001);
    let no_sgf = AblationFlags {
        sgf: false,
        ..AblationFlags::default()
    };
    let (mut rec_on, mut rec_off) = (0, 0);
    for run in 0..OCCLUSION_RUNS {
        let clean = SimConfig {
            seed: 9_000 + run as u64,
            ..SimConfig::default()
        };
        let occluded = SimConfig {
            occlusion_burst: Some(OCCLUSION_BURST),
            ..clean.clone()
        };
        let video = |cfg: &SimConfig| gen_sequence(cfg, &chain, 0, &mut ChaCha8Rng::seed_from_u64(cfg.video_seed(0))).unwrap();
        let baseline = track_sequence(&video(&clean), AblationFlags::default(), &weights, &tc).unwrap();
        let finite: Vec<f64> = baseline.iter().map(|r| r.add_mm).filter(|v| v.is_finite()).collect();
        let level = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
        let burst = video(&occluded);
        if recovered(&track_sequence(&burst, AblationFlags::default(), &weights, &tc).unwrap(), level) {
            rec_on += 1;
        }
        if recovered(&track_sequence(&burst, no_sgf, &weights, &tc).unwrap(), level) {
            rec_off += 1;
        }
    }
    let n = OCCLUSION_RUNS as f64;
    let (on, off) = (rec_on as f64 / n, rec_off as f64 / n);
    outcome(
        on >= RECOVERY_RATE && off <= on,
        format!(
            "burst frames {}-{} at p={}: recovered within {RECOVERY_WINDOW} frames in {:.0}% of runs with SGF (>= {:.0}%), \
             {:.0}% without SGF (must not exceed)",
            OCCLUSION_BURST.start,
            OCCLUSION_BURST.end,
            OCCLUSION_BURST.prob,
            100.0 * on,
            100.0 * RECOVERY_RATE,
            100.0 * off
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "exact recovery", criterion_1),
        (2, "reweighted refinement", criterion_2),
        (3, "multi-frame trend", criterion_3),
        (4, "gradient suite", criterion_4),
        (5, "belief-map round trip", criterion_5),
        (6, "metric correctness", criterion_6),
        (7, "ablation ordering", criterion_7),
        (8, "determinism", criterion_8),
        (9, "occlusion recovery", criterion_9),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !o.pass {
            failed += 1;
        }
        println!(
            "[{}] criterion {n} ({name}): {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    // failures are reported above; a nonzero exit is opt-in so the rest of
    // the workspace suite still runs
    if failed == 0 || std::env::var_os("SGTA_ACCEPTANCE_STRICT").is_none() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
