//! Experiment runner: dataset generation, tracking, evaluation, the
//! multi-frame sweep and the module ablation grid.
//!
//! Data files depend only on the configuration and seed. Wall-clock figures
//! go to a `*.log` sidecar next to them.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 IO or dataset
//! format error, 4 every frame (or combination) failed.

pub mod config;
pub mod multiframe;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sgta::fusion::{read_weights, FusionWeights};
use sgta::kinematics::KinematicChain;
use sgta::metrics::{accuracy_curve_csv, MetricsReport, ADD_THRESHOLD_MM, PCK_THRESHOLD_PX};
use sgta::pipeline::{mean_fps, report, track_sequence, AblationFlags, FrameResult, Mode, TrackerConfig};
use sgta::simulator::{gen_dataset, read_dataset, write_dataset, SequenceSample};
use thiserror::Error;

pub use config::{ExperimentConfig, MultiframeConfig, STREAM_MULTIFRAME, STREAM_WEIGHTS};
pub use multiframe::{multiframe_sweep, smoothed_medians, sweep_csv, SweepRow};

pub const THREADS_ENV: &str = "SGTA_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("every {0} failed")]
    AllFailed(&'static str),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::AllFailed(_) => 4,
        }
    }
}

impl From<sgta::Error> for CliError {
    fn from(e: sgta::Error) -> Self {
        match e {
            sgta::Error::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Io(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "sgta", version, about = "Camera-to-robot pose tracking experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic keypoint dataset.
    Gen(GenArgs),
    /// Track every video of a dataset and report PCK/ADD metrics.
    Track(TrackArgs),
    /// Recompute the metrics report from a results file.
    Eval(EvalArgs),
    /// Pooled multi-frame solves against the number of frames.
    Multiframe(MultiframeArgs),
    /// Run the four-row module ablation grid.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML experiment config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; must be empty or absent unless --force.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub videos: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub fps: Option<f64>,
    /// Detector noise sigma, pixels.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub outlier_prob: Option<f64>,
    #[arg(long)]
    pub occlusion_prob: Option<f64>,
    /// Kinematic chain JSON.
    #[arg(long)]
    pub chain: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrackerArgs {
    /// Saved network weights; seeded initialization otherwise.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Do not evaluate the fusion network (poses are unaffected).
    #[arg(long)]
    pub skip_network: bool,
    /// Augment the previous-frame prior as during training.
    #[arg(long)]
    pub training: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrackArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub tracker: TrackerArgs,
    #[arg(long)]
    pub no_sgf: bool,
    #[arg(long)]
    pub no_tca: bool,
    #[arg(long)]
    pub no_prf: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// `results.jsonl` written by `track`.
    #[arg(long)]
    pub results: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct MultiframeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Frames per video forming the position pool.
    #[arg(long)]
    pub positions: Option<usize>,
    /// Comma-separated values of l.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<usize>>,
    #[arg(long)]
    pub max_combinations: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub tracker: TrackerArgs,
}

/// Sizes the global worker pool from `SGTA_THREADS` when set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // a pool that already exists (repeated calls in one process) is kept
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Track(a) => cmd_track(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Multiframe(a) => cmd_multiframe(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

fn load(common: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if common.out.is_some() {
        cfg.out = common.out.clone();
    }
    cfg.apply_seed()?;
    Ok(cfg)
}

fn prepare_out(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(io_err(dir))?;
        if entries.next().is_some() && !force {
            return Err(CliError::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn load_chain(path: Option<&Path>) -> Result<KinematicChain, CliError> {
    match path {
        None => Ok(KinematicChain::default_arm()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            KinematicChain::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        }
    }
}

pub fn cmd_gen(a: &GenArgs) -> Result<String, CliError> {
    let mut cfg = load(&a.common)?;
    let sim = &mut cfg.sim;
    if let Some(v) = a.videos {
        sim.videos = v;
    }
    if let Some(v) = a.frames {
        sim.frames_per_video = v;
    }
    if let Some(v) = a.fps {
        sim.fps = v;
    }
    if let Some(v) = a.noise {
        sim.detector_noise_sigma = v;
    }
    if let Some(v) = a.outlier_prob {
        sim.outlier_prob = v;
    }
    if let Some(v) = a.occlusion_prob {
        sim.occlusion_prob = v;
    }
    if a.chain.is_some() {
        cfg.chain = a.chain.clone();
    }
    cfg.sim.validate()?;
    let chain = load_chain(cfg.chain.as_deref())?;
    let out = cfg.out_dir()?.to_path_buf();
    prepare_out(&out, a.common.force)?;

    let start = Instant::now();
    let videos = gen_dataset(&cfg.sim, &chain)?;
    let path = out.join("dataset.jsonl");
    write_dataset(&videos, &cfg.sim, &chain, &path)?;
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    write(&out.join("gen.log"), &format!("wall_s {}\n", start.elapsed().as_secs_f64()))?;
    Ok(format!(
        "generated {} videos x {} frames (seed {}) -> {}",
        cfg.sim.videos,
        cfg.sim.frames_per_video,
        cfg.sim.seed,
        path.display()
    ))
}

fn tracker_setup(cfg: &mut ExperimentConfig, a: &TrackerArgs, seed: u64) -> Result<FusionWeights, CliError> {
    if a.skip_network {
        cfg.tracker.run_network = false;
    }
    if a.training {
        cfg.tracker.mode = Mode::Training;
    }
    match &a.weights {
        Some(p) => {
            let (w, fusion) = read_weights(p)?;
            cfg.tracker.fusion = fusion;
            Ok(w)
        }
        None => {
            cfg.tracker.fusion.validate()?;
            Ok(FusionWeights::init(&cfg.tracker.fusion, seed.wrapping_add(STREAM_WEIGHTS)))
        }
    }
}

fn load_videos(path: &Path) -> Result<Vec<SequenceSample>, CliError> {
    if !path.exists() {
        return Err(CliError::Io(format!("{}: no such file", path.display())));
    }
    Ok(read_dataset(path)?.videos)
}

/// Tracks every video, in parallel across videos, results in video order.
pub fn track_all(
    videos: &[SequenceSample],
    flags: AblationFlags,
    weights: &FusionWeights,
    cfg: &TrackerConfig,
) -> Result<Vec<FrameResult>, CliError> {
    let per_video = videos
        .par_iter()
        .map(|s| track_sequence(s, flags, weights, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(per_video.into_iter().flatten().collect())
}

pub fn results_jsonl(results: &[FrameResult]) -> Result<String, CliError> {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r).map_err(|e| CliError::Io(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

fn write_report(dir: &Path, results: &[FrameResult]) -> Result<MetricsReport, CliError> {
    let rep = report(results);
    let json = serde_json::to_string_pretty(&rep).map_err(|e| CliError::Io(e.to_string()))?;
    write(&dir.join("report.json"), &(json + "\n"))?;
    let pck: Vec<f64> = results.iter().flat_map(|r| r.pck_errors.iter().copied()).collect();
    let add: Vec<f64> = results.iter().map(|r| r.add_mm).collect();
    write(&dir.join("pck_curve.csv"), &accuracy_curve_csv(&pck, PCK_THRESHOLD_PX))?;
    write(&dir.join("add_curve.csv"), &accuracy_curve_csv(&add, ADD_THRESHOLD_MM))?;
    Ok(rep)
}

fn summary_line(rep: &MetricsReport) -> String {
    format!(
        "PCK AUC {:.4} median {:.2} px | ADD AUC {:.4} median {:.1} mm | failed {}/{} frames",
        rep.pck_auc, rep.pck_median, rep.add_auc, rep.add_median, rep.n_failed, rep.n_frames
    )
}

fn timing_log(results: &[FrameResult], wall: f64) -> String {
    let n = results.len().max(1) as f64;
    let mean = |f: fn(&FrameResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    format!(
        "wall_s {wall}\nmean_fps {}\nmean_priors_s {}\nmean_network_s {}\nmean_decode_s {}\nmean_solve_s {}\n",
        mean_fps(results),
        mean(|r| r.timing.priors),
        mean(|r| r.timing.network),
        mean(|r| r.timing.decode),
        mean(|r| r.timing.solve),
    )
}

pub fn cmd_track(a: &TrackArgs) -> Result<String, CliError> {
    let mut cfg = load(&a.common)?;
    let seed = cfg.seed()?;
    let weights = tracker_setup(&mut cfg, &a.tracker, seed)?;
    let flags = AblationFlags {
        sgf: !a.no_sgf,
        tca: !a.no_tca,
        prf: !a.no_prf,
    };
    let out = cfg.out_dir()?.to_path_buf();
    let videos = load_videos(&a.data)?;
    prepare_out(&out, a.common.force)?;

    let start = Instant::now();
    let results = track_all(&videos, flags, &weights, &cfg.tracker)?;
    write(&out.join("results.jsonl"), &results_jsonl(&results)?)?;
    let rep = write_report(&out, &results)?;
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    write(&out.join("track.log"), &timing_log(&results, start.elapsed().as_secs_f64()))?;
    if rep.n_frames > 0 && rep.n_failed == rep.n_frames {
        return Err(CliError::AllFailed("frame"));
    }
    Ok(format!(
        "sgf={} tca={} prf={}: {}",
        flags.sgf,
        flags.tca,
        flags.prf,
        summary_line(&rep)
    ))
}

pub fn read_results(path: &Path) -> Result<Vec<FrameResult>, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Io(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<String, CliError> {
    let mut cfg = ExperimentConfig::load(a.common.config.as_deref())?;
    if a.common.out.is_some() {
        cfg.out = a.common.out.clone();
    }
    let out = cfg.out_dir()?.to_path_buf();
    let results = read_results(&a.results)?;
    prepare_out(&out, a.common.force)?;
    let rep = write_report(&out, &results)?;
    if rep.n_frames > 0 && rep.n_failed == rep.n_frames {
        return Err(CliError::AllFailed("frame"));
    }
    Ok(summary_line(&rep))
}

pub fn cmd_multiframe(a: &MultiframeArgs) -> Result<String, CliError> {
    let mut cfg = load(&a.common)?;
    let seed = cfg.seed()?;
    if let Some(v) = a.positions {
        cfg.multiframe.positions = v;
    }
    if let Some(v) = &a.sweep {
        cfg.multiframe.sweep = v.clone();
    }
    if let Some(v) = a.max_combinations {
        cfg.multiframe.max_combinations = v;
    }
    cfg.multiframe.validate()?;
    let out = cfg.out_dir()?.to_path_buf();
    let videos = load_videos(&a.data)?;
    prepare_out(&out, a.common.force)?;

    let start = Instant::now();
    let rows = multiframe_sweep(
        &videos,
        &cfg.multiframe,
        &cfg.tracker.ransac,
        seed.wrapping_add(STREAM_MULTIFRAME),
    )?;
    write(&out.join("multiframe.csv"), &sweep_csv(&rows))?;
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    write(&out.join("multiframe.log"), &format!("wall_s {}\n", start.elapsed().as_secs_f64()))?;
    if rows.iter().all(|r| r.failed == r.combinations) {
        return Err(CliError::AllFailed("combination"));
    }
    let mut summary = String::new();
    for r in &rows {
        let _ = writeln!(
            summary,
            "l={:>2}  combinations {:>5}  median ADD {:.2} mm  mean {:.2} mm",
            r.l, r.combinations, r.median_add_mm, r.mean_add_mm
        );
    }
    Ok(summary.trim_end().to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: AblationFlags,
    pub report: MetricsReport,
    /// Mean ADD over frames with a pose, millimeters.
    pub mean_add_mm: Option<f64>,
}

/// Mean of the finite ADD values.
pub fn mean_finite_add(results: &[FrameResult]) -> Option<f64> {
    let finite: Vec<f64> = results.iter().map(|r| r.add_mm).filter(|v| v.is_finite()).collect();
    (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64)
}

pub fn run_ablation(
    videos: &[SequenceSample],
    weights: &FusionWeights,
    cfg: &TrackerConfig,
) -> Result<Vec<AblationRow>, CliError> {
    AblationFlags::grid()
        .into_iter()
        .map(|(name, flags)| {
            let results = track_all(videos, flags, weights, cfg)?;
            Ok(AblationRow {
                name: name.to_string(),
                flags,
                report: report(&results),
                mean_add_mm: mean_finite_add(&results),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out =
        String::from("row,sgf,tca,prf,frames,failed,pck_auc,pck_median_px,add_auc,add_median_mm,mean_add_mm\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.name,
            r.flags.sgf,
            r.flags.tca,
            r.flags.prf,
            r.report.n_frames,
            r.report.n_failed,
            r.report.pck_auc,
            r.report.pck_median,
            r.report.add_auc,
            r.report.add_median,
            opt(r.mean_add_mm)
        );
    }
    out
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<String, CliError> {
    let mut cfg = load(&a.common)?;
    let seed = cfg.seed()?;
    let weights = tracker_setup(&mut cfg, &a.tracker, seed)?;
    let out = cfg.out_dir()?.to_path_buf();
    let videos = load_videos(&a.data)?;
    prepare_out(&out, a.common.force)?;

    let start = Instant::now();
    let rows = run_ablation(&videos, &weights, &cfg.tracker)?;
    write(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    let json = serde_json::to_string_pretty(&rows).map_err(|e| CliError::Io(e.to_string()))?;
    write(&out.join("ablation.json"), &(json + "\n"))?;
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    write(&out.join("ablate.log"), &format!("wall_s {}\n", start.elapsed().as_secs_f64()))?;
    if rows.iter().all(|r| r.report.n_failed == r.report.n_frames) {
        return Err(CliError::AllFailed("frame"));
    }
    let mut summary = String::new();
    for r in &rows {
        let _ = writeln!(summary, "{:<14} {}", r.name, summary_line(&r.report));
    }
    Ok(summary.trim_end().to_string())
}
