//! Online tracking: one frame at a time, carrying the previous pose estimate
//! and keypoints forward as priors.
//!
//! Per frame the tracker renders the previous-keypoint belief `B_{t−1}` and,
//! with the structure prior enabled, the reprojection belief `B̃_t` of the
//! current 3D keypoints through the previous pose. Both frames are encoded,
//! fused and decoded by the fusion network. Keypoints are then read from an
//! evidence head: the pseudo-detections injected at the decode boundary, with
//! the structure prior filling channels that have no detection. Finally the
//! pose is solved with RANSAC and, optionally, the reweighted refiner.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beliefmap::{
    augment_prior, decode_peaks, reproject_keypoints, render_belief, BeliefMap, ChannelMode, DetectionHead,
    HeadConfig, KeypointSet2D, Resolution,
};
use crate::error::{Error, Result};
use crate::fusion::{normalize_image, run_network, FusionConfig, FusionWeights, ImageTensor, NetworkInput};
use crate::geometry::{AffineMap2D, CameraIntrinsics, PoseSE3};
use crate::kinematics::{KeypointSet3D, MIN_KEYPOINTS};
use crate::metrics::{add_error, nonfinite_as_null, pck_errors, MetricsReport};
use crate::simulator::{FrameRecord, SequenceSample};
use crate::solver::{correspondences, pnp_ransac, refine_correspondences, RansacConfig};

/// Module switches; all on is the full tracker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Structure-prior reprojection belief.
    pub sgf: bool,
    /// Temporal cross-attention (otherwise per-cell concatenation).
    pub tca: bool,
    /// Reweighted pose refinement (otherwise the RANSAC pose).
    pub prf: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            sgf: true,
            tca: true,
            prf: true,
        }
    }
}

impl AblationFlags {
    pub const NONE: AblationFlags = AblationFlags {
        sgf: false,
        tca: false,
        prf: false,
    };

    /// The four ablation rows: full, without refiner, without refiner and
    /// attention, and the plain baseline.
    pub fn grid() -> [(&'static str, AblationFlags); 4] {
        [
            ("full", AblationFlags::default()),
            ("no-prf", AblationFlags { prf: false, ..AblationFlags::default() }),
            ("no-prf-no-tca", AblationFlags { sgf: true, ..AblationFlags::NONE }),
            ("baseline", AblationFlags::NONE),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Inference,
    /// Jitters and drops the previous-frame keypoints before rendering them.
    Training,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub fusion: FusionConfig,
    pub ransac: RansacConfig,
    pub mode: Mode,
    /// Peak height of structure-prior evidence relative to a detection.
    pub prior_gain: f64,
    /// Seed of the training-mode prior augmentation.
    pub seed: u64,
    /// Evaluate the fusion network each frame. Its head is not read by the
    /// solver, so switching this off changes timings only.
    pub run_network: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            fusion: FusionConfig::default(),
            ransac: RansacConfig::default(),
            mode: Mode::Inference,
            prior_gain: 0.5,
            seed: 0,
            run_network: true,
        }
    }
}

impl TrackerConfig {
    pub fn head(&self) -> &HeadConfig {
        &self.fusion.head
    }
}

#[derive(Debug, Clone)]
pub struct TrackerState {
    /// Last successfully solved pose.
    pub prev_pose: Option<PoseSE3>,
    /// Keypoints decoded in the previous frame, raw image coordinates.
    pub prev_keypoints2d: Option<KeypointSet2D>,
    /// `B_{t−1}` for the next frame.
    pub prev_belief: BeliefMap,
    /// `I_{t−1}` for the next frame; `None` reuses the next frame's own image.
    pub prev_image: Option<ImageTensor>,
    /// Frames processed so far.
    pub frame_index: usize,
    rng: ChaCha8Rng,
}

impl TrackerState {
    pub fn new(cfg: &TrackerConfig) -> Self {
        let n = cfg.head().input_size;
        TrackerState {
            prev_pose: None,
            prev_keypoints2d: None,
            prev_belief: BeliefMap::zeros(n, n, 1),
            prev_image: None,
            frame_index: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }
}

/// Wall-clock seconds per stage. Kept out of serialized results so that
/// output files stay reproducible.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub priors: f64,
    pub network: f64,
    pub decode: f64,
    pub solve: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub video: usize,
    pub frame: usize,
    /// `None` when the solve failed.
    pub pose: Option<PoseSE3>,
    /// Pose the tracker holds after this frame (last successful solve).
    pub held_pose: Option<PoseSE3>,
    pub keypoints2d: KeypointSet2D,
    /// ADD of `pose` in millimeters; infinite when the solve failed.
    #[serde(with = "nonfinite_as_null")]
    pub add_mm: f64,
    /// ADD of `held_pose`; infinite before the first success.
    #[serde(with = "nonfinite_as_null")]
    pub held_add_mm: f64,
    /// 2D errors of keypoints whose ground truth is in the image.
    pub pck_errors: Vec<f64>,
    pub inliers: usize,
    pub failure: Option<String>,
    #[serde(skip)]
    pub timing: StageTimings,
}

/// The belief maps and keypoints the network saw for one frame.
#[derive(Debug, Clone)]
pub struct FramePriors {
    /// `B_{t−1}`.
    pub prev_belief: BeliefMap,
    /// `B̃_t`; blank without the structure prior or a previous pose.
    pub reprojected_belief: BeliefMap,
    /// Keypoints behind `B̃_t`, input frame.
    pub reprojected: Option<KeypointSet2D>,
}

/// Raw image to network input mapping for `k`.
pub fn input_map(k: &CameraIntrinsics, cfg: &HeadConfig) -> AffineMap2D {
    AffineMap2D::letterbox(k.width, k.height, cfg.input_size as u32)
}

/// Stand-in camera image: the detections rendered as a belief map, repeated
/// over three channels and normalized.
pub fn synthetic_image(detections_input: &KeypointSet2D, cfg: &FusionConfig) -> ImageTensor {
    let b = render_belief(detections_input, &cfg.head, Resolution::Full, ChannelMode::Single);
    let mut rgb = BeliefMap::zeros(b.width, b.height, cfg.image_channels);
    for c in 0..cfg.image_channels {
        let n = b.values.len();
        rgb.values[c * n..(c + 1) * n].copy_from_slice(&b.values);
    }
    normalize_image(&rgb)
}

/// Head carrying the detections (full height) and, in channels without a
/// detection, the structure-prior keypoints at `prior_gain`. Detection
/// offsets take precedence where cells collide.
pub fn evidence_head(
    detections: &KeypointSet2D,
    prior: Option<&KeypointSet2D>,
    cfg: &HeadConfig,
    prior_gain: f64,
) -> DetectionHead {
    let mut head = DetectionHead::for_config(cfg);
    let mut filled = vec![false; cfg.keypoints];
    for (i, p) in detections.points.iter().enumerate() {
        let ch = detections.ids[i];
        if detections.in_frame[i] && ch < cfg.keypoints {
            filled[ch] |= head.draw_keypoint(ch, p, cfg, 1.0, true);
        }
    }
    if let Some(prior) = prior {
        for (i, p) in prior.points.iter().enumerate() {
            let ch = prior.ids[i];
            if prior.in_frame[i] && ch < cfg.keypoints && !filled[ch] {
                head.draw_keypoint(ch, p, cfg, prior_gain, false);
            }
        }
    }
    head
}

fn usable(kps: &KeypointSet2D) -> KeypointSet2D {
    let mut out = kps.clone();
    for i in 0..out.len() {
        out.in_frame[i] = out.in_frame[i] && out.confidence[i] > 0.0;
    }
    out
}

/// Builds `B_{t−1}` and `B̃_t` for the frame about to be processed.
pub fn frame_priors(
    state: &TrackerState,
    kp3d: &KeypointSet3D,
    k: &CameraIntrinsics,
    flags: AblationFlags,
    cfg: &TrackerConfig,
) -> FramePriors {
    let head = cfg.head();
    let n = head.input_size;
    let reprojected = match (flags.sgf, state.prev_pose) {
        (true, Some(pose)) => Some(reproject_keypoints(&pose, kp3d, k, &input_map(k, head), head)),
        _ => None,
    };
    let reprojected_belief = match &reprojected {
        Some(kps) => render_belief(kps, head, Resolution::Full, ChannelMode::Single),
        None => BeliefMap::zeros(n, n, 1),
    };
    FramePriors {
        prev_belief: state.prev_belief.clone(),
        reprojected_belief,
        reprojected,
    }
}

fn solve(
    decoded: &KeypointSet2D,
    kp3d: &KeypointSet3D,
    k: &CameraIntrinsics,
    flags: AblationFlags,
    cfg: &RansacConfig,
) -> Result<(PoseSE3, usize)> {
    let corr = correspondences(decoded, kp3d)?;
    if corr.len() < MIN_KEYPOINTS {
        return Err(Error::InsufficientPoints {
            required: MIN_KEYPOINTS,
            actual: corr.len(),
        });
    }
    if flags.prf {
        let r = refine_correspondences(&corr, k, cfg)?;
        Ok((r.pose, r.inliers.len()))
    } else {
        let r = pnp_ransac(&corr, k, cfg)?;
        Ok((r.pose, r.inliers.len()))
    }
}

fn seconds_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Processes one frame and returns the advanced state. A failed solve is
/// reported in the result and leaves the held pose untouched.
pub fn track_frame(
    mut state: TrackerState,
    frame: &FrameRecord,
    k: &CameraIntrinsics,
    flags: AblationFlags,
    weights: &FusionWeights,
    cfg: &TrackerConfig,
) -> Result<(FrameResult, TrackerState)> {
    let start = Instant::now();
    let head_cfg = cfg.head();
    let m = input_map(k, head_cfg);
    let size = head_cfg.input_size as f64;
    let detections = frame.kp2d_det.mapped(&m, Some((size, size)));
    let image = synthetic_image(&detections, &cfg.fusion);
    let priors = frame_priors(&state, &frame.kp3d, k, flags, cfg);
    let mut timing = StageTimings {
        priors: seconds_since(start),
        ..StageTimings::default()
    };

    let t = Instant::now();
    let prev_image = state.prev_image.take().unwrap_or_else(|| image.clone());
    if cfg.run_network {
        let prev_kps = match &state.prev_keypoints2d {
            Some(p) if !state.prev_belief.is_blank() => usable(&p.mapped(&m, Some((size, size)))),
            _ => KeypointSet2D::new(Vec::new()),
        };
        let cur_kps = priors.reprojected.clone().unwrap_or_else(|| prev_kps.clone());
        let input = NetworkInput {
            prev_image: &prev_image,
            prev_belief: &priors.prev_belief,
            cur_image: &image,
            cur_belief: &priors.reprojected_belief,
            prev_keypoints: &prev_kps,
            cur_keypoints: &cur_kps,
        };
        run_network(&input, flags.tca, &cfg.fusion, weights)?;
    }
    timing.network = seconds_since(t);

    let t = Instant::now();
    let evidence = evidence_head(&detections, priors.reprojected.as_ref(), head_cfg, cfg.prior_gain);
    let decoded = decode_peaks(&evidence, &m, (k.width, k.height))?;
    timing.decode = seconds_since(t);

    let t = Instant::now();
    let solved = solve(&decoded, &frame.kp3d, k, flags, &cfg.ransac);
    timing.solve = seconds_since(t);

    let (pose, inliers, failure) = match solved {
        Ok((pose, inliers)) => (Some(pose), inliers, None),
        Err(e) => (None, 0, Some(e.to_string())),
    };
    if pose.is_some() {
        state.prev_pose = pose;
    }
    let add = |p: &Option<PoseSE3>| p.map_or(f64::INFINITY, |p| add_error(&p, &frame.pose, &frame.kp3d));
    let result = FrameResult {
        video: frame.video,
        frame: frame.frame,
        add_mm: add(&pose),
        held_add_mm: add(&state.prev_pose),
        pose,
        held_pose: state.prev_pose,
        pck_errors: pck_errors(&decoded, &frame.kp2d_gt)?,
        keypoints2d: decoded.clone(),
        inliers,
        failure,
        timing,
    };

    // B_0 and B_1 stay blank; from then on the decoded keypoints are the prior
    state.frame_index += 1;
    state.prev_belief = if state.frame_index <= 1 {
        BeliefMap::zeros(head_cfg.input_size, head_cfg.input_size, 1)
    } else {
        let mut prior = usable(&decoded.mapped(&m, Some((size, size))));
        if cfg.mode == Mode::Training {
            prior = augment_prior(&prior, &mut state.rng);
        }
        render_belief(&prior, head_cfg, Resolution::Full, ChannelMode::Single)
    };
    state.prev_keypoints2d = Some(decoded);
    state.prev_image = Some(image);
    let mut result = result;
    result.timing.total = seconds_since(start);
    Ok((result, state))
}

/// Tracks a whole video from a fresh state. The first frame doubles as its
/// own predecessor.
pub fn track_sequence(
    sample: &SequenceSample,
    flags: AblationFlags,
    weights: &FusionWeights,
    cfg: &TrackerConfig,
) -> Result<Vec<FrameResult>> {
    if sample.frames.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut state = TrackerState::new(cfg);
    let mut out = Vec::with_capacity(sample.frames.len());
    for frame in &sample.frames {
        let (r, next) = track_frame(state, frame, &sample.intrinsics, flags, weights, cfg)?;
        state = next;
        out.push(r);
    }
    Ok(out)
}

/// Metrics over any collection of frame results.
pub fn report<'a>(results: impl IntoIterator<Item = &'a FrameResult>) -> MetricsReport {
    let mut pck = Vec::new();
    let mut add = Vec::new();
    for r in results {
        pck.extend_from_slice(&r.pck_errors);
        add.push(r.add_mm);
    }
    MetricsReport::from_errors(&pck, &add)
}

/// Frames per second over the summed per-frame wall time.
pub fn mean_fps<'a>(results: impl IntoIterator<Item = &'a FrameResult>) -> f64 {
    let (n, total) = results
        .into_iter()
        .fold((0usize, 0.0), |(n, t), r| (n + 1, t + r.timing.total));
    if total > 0.0 {
        n as f64 / total
    } else {
        0.0
    }
}
