//! Keypoint-level synthetic tracking videos: a fixed camera per video looking
//! at a manipulator that follows smooth joint trajectories, with a noisy
//! pseudo-detector standing in for a learned keypoint network.
//!
//! Datasets are stored as JSON lines. The first line is a manifest; every
//! following line is one frame record carrying a SHA-256 of its own content.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::beliefmap::KeypointSet2D;
use crate::error::{Error, Result};
use crate::geometry::{project, CameraIntrinsics, PoseSE3};
use crate::kinematics::{fk_keypoints, JointConfig, KeypointSet3D, KinematicChain};

pub const DATASET_MAGIC: &str = "sgta-dataset";
pub const DATASET_VERSION: u32 = 1;
/// Stand-in coordinate for keypoints that have no projection.
pub const MISSING_COORD: f64 = -999.0;

/// Occlusion probability override for a range of frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionBurst {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub videos: usize,
    pub frames_per_video: usize,
    pub fps: f64,
    /// Joint speed cap, rad/s.
    pub joint_velocity_max: f64,
    /// Camera distance from the base origin, meters.
    pub camera_distance_range: [f64; 2],
    /// Camera elevation above the base plane, radians.
    pub camera_elevation_range: [f64; 2],
    /// Maximum roll about the optical axis, radians.
    pub camera_roll_max: f64,
    pub detector_noise_sigma: f64,
    pub outlier_prob: f64,
    pub outlier_magnitude: f64,
    pub occlusion_prob: f64,
    pub occlusion_burst: Option<OcclusionBurst>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            videos: 10,
            frames_per_video: 30,
            fps: 30.0,
            joint_velocity_max: 0.5,
            camera_distance_range: [2.0, 3.0],
            camera_elevation_range: [0.1, 0.7],
            camera_roll_max: 0.3,
            detector_noise_sigma: 2.0,
            outlier_prob: 0.05,
            outlier_magnitude: 20.0,
            occlusion_prob: 0.05,
            occlusion_burst: None,
            seed: 0,
        }
    }
}

fn prob_ok(p: f64) -> bool {
    (0.0..=1.0).contains(&p)
}

impl SimConfig {
    /// All corruption switched off.
    pub fn noiseless() -> Self {
        SimConfig {
            detector_noise_sigma: 0.0,
            outlier_prob: 0.0,
            occlusion_prob: 0.0,
            ..SimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        let [d0, d1] = self.camera_distance_range;
        let [e0, e1] = self.camera_elevation_range;
        if !(self.fps > 0.0) {
            return bad("fps must be positive");
        }
        if self.frames_per_video == 0 {
            return bad("frames_per_video must be positive");
        }
        if !(d0 > 0.0 && d1 >= d0) {
            return bad("camera_distance_range must be positive and ordered");
        }
        if !(e0 > -PI / 2.0 && e1 < PI / 2.0 && e1 >= e0) {
            return bad("camera_elevation_range must be ordered within (-pi/2, pi/2)");
        }
        if !(self.joint_velocity_max >= 0.0
            && self.detector_noise_sigma >= 0.0
            && self.outlier_magnitude >= 0.0
            && self.camera_roll_max >= 0.0)
        {
            return bad("velocities, noise and magnitudes must be non-negative");
        }
        let burst_ok = self.occlusion_burst.is_none_or(|b| prob_ok(b.prob) && b.start <= b.end);
        if !(prob_ok(self.outlier_prob) && prob_ok(self.occlusion_prob) && burst_ok) {
            return bad("probabilities must lie in [0, 1]");
        }
        Ok(())
    }

    /// Seed of the generator for `video`.
    pub fn video_seed(&self, video: usize) -> u64 {
        self.seed.wrapping_add(video as u64)
    }

    fn occlusion_at(&self, frame: usize) -> f64 {
        match self.occlusion_burst {
            Some(b) if (b.start..=b.end).contains(&frame) => b.prob.max(self.occlusion_prob),
            _ => self.occlusion_prob,
        }
    }
}

/// Camera on a shell around the base, looking at the base origin, with a
/// random roll about the optical axis. Intrinsics are fixed.
pub fn sample_camera<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> (CameraIntrinsics, PoseSE3) {
    let [d0, d1] = cfg.camera_distance_range;
    let [e0, e1] = cfg.camera_elevation_range;
    let azimuth = rng.random_range(0.0..2.0 * PI);
    let elevation = if e1 > e0 { rng.random_range(e0..e1) } else { e0 };
    let distance = if d1 > d0 { rng.random_range(d0..d1) } else { d0 };
    let roll = if cfg.camera_roll_max > 0.0 {
        rng.random_range(-cfg.camera_roll_max..cfg.camera_roll_max)
    } else {
        0.0
    };
    let center = distance
        * Vector3::new(
            elevation.cos() * azimuth.cos(),
            elevation.cos() * azimuth.sin(),
            elevation.sin(),
        );
    let forward = -center.normalize();
    let right = forward.cross(&Vector3::z()).normalize();
    let down = forward.cross(&right);
    let look = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let rotation = crate::geometry::axis_rotation(&Vector3::z(), roll) * look;
    let pose = PoseSE3::new(rotation, -(rotation * center));
    (CameraIntrinsics::default_vga(), pose)
}

/// Per-joint `q0 + a sin(ω t + φ)` with `a ω ≤ joint_velocity_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTrajectory {
    pub center: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub frequency: Vec<f64>,
    pub phase: Vec<f64>,
}

impl JointTrajectory {
    pub fn sample<R: Rng + ?Sized>(chain: &KinematicChain, v_max: f64, rng: &mut R) -> Self {
        let n = chain.num_links();
        let nominal = chain.nominal_config().angles;
        let mut t = JointTrajectory {
            center: Vec::with_capacity(n),
            amplitude: Vec::with_capacity(n),
            frequency: Vec::with_capacity(n),
            phase: Vec::with_capacity(n),
        };
        for q in nominal {
            let w = rng.random_range(0.5..2.0);
            t.center.push(q + rng.random_range(-0.3..0.3));
            t.amplitude.push(rng.random_range(0.3..1.0) * v_max / w);
            t.frequency.push(w);
            t.phase.push(rng.random_range(0.0..2.0 * PI));
        }
        t
    }

    pub fn at(&self, time: f64) -> JointConfig {
        JointConfig::new(
            (0..self.center.len())
                .map(|j| self.center[j] + self.amplitude[j] * (self.frequency[j] * time + self.phase[j]).sin())
                .collect(),
        )
    }
}

/// Gaussian jitter on every point, replacement by an outlier exactly
/// `outlier_magnitude` from the true point, then occlusion. Each point always
/// consumes the same number of draws.
pub fn corrupt_detections<R: Rng + ?Sized>(kps: &KeypointSet2D, cfg: &SimConfig, rng: &mut R) -> KeypointSet2D {
    corrupt_with(kps, cfg, cfg.occlusion_prob, rng)
}

fn corrupt_with<R: Rng + ?Sized>(kps: &KeypointSet2D, cfg: &SimConfig, occlusion: f64, rng: &mut R) -> KeypointSet2D {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = kps.clone();
    for i in 0..kps.len() {
        let noise = Vector2::new(normal.sample(rng), normal.sample(rng)) * cfg.detector_noise_sigma;
        let outlier = rng.random::<f64>() < cfg.outlier_prob;
        let angle = rng.random_range(0.0..2.0 * PI);
        let occluded = rng.random::<f64>() < occlusion;
        let p = kps.points[i];
        out.points[i] = if outlier {
            p + Vector2::new(angle.cos(), angle.sin()) * cfg.outlier_magnitude
        } else {
            p + noise
        };
        if occluded {
            out.in_frame[i] = false;
        }
        out.confidence[i] = if out.in_frame[i] { 1.0 } else { 0.0 };
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub video: usize,
    pub frame: usize,
    pub q: JointConfig,
    pub pose: PoseSE3,
    pub kp3d: KeypointSet3D,
    /// Exact projections; `in_frame` marks those inside the image.
    pub kp2d_gt: KeypointSet2D,
    /// Pseudo-detections; `in_frame` marks the usable ones.
    pub kp2d_det: KeypointSet2D,
    /// In frame and not occluded.
    pub visible: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub video: usize,
    pub intrinsics: CameraIntrinsics,
    pub pose: PoseSE3,
    pub frames: Vec<FrameRecord>,
}

/// Exact projections of `kp` with in-image flags; points behind the camera
/// get [`MISSING_COORD`].
pub fn project_keypoints(k: &CameraIntrinsics, pose: &PoseSE3, kp: &KeypointSet3D) -> KeypointSet2D {
    let mut out = KeypointSet2D::new(Vec::with_capacity(kp.len()));
    out.ids = kp.ids.clone();
    for p in &kp.points {
        match project(k, pose, p) {
            Ok(uv) => {
                out.in_frame.push(k.contains(&uv));
                out.points.push(uv);
            }
            Err(_) => {
                out.in_frame.push(false);
                out.points.push(Vector2::new(MISSING_COORD, MISSING_COORD));
            }
        }
    }
    out.confidence = out.in_frame.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
    out
}

/// One video: camera, trajectory, then per frame FK, projection and
/// corruption, all drawn from `rng` in that order.
pub fn gen_sequence<R: Rng + ?Sized>(
    cfg: &SimConfig,
    chain: &KinematicChain,
    video: usize,
    rng: &mut R,
) -> Result<SequenceSample> {
    let (k, pose) = sample_camera(cfg, rng);
    let traj = JointTrajectory::sample(chain, cfg.joint_velocity_max, rng);
    let mut frames = Vec::with_capacity(cfg.frames_per_video);
    for f in 0..cfg.frames_per_video {
        let q = traj.at(f as f64 / cfg.fps);
        let kp3d = fk_keypoints(chain, &q)?;
        let gt = project_keypoints(&k, &pose, &kp3d);
        let det = corrupt_with(&gt, cfg, cfg.occlusion_at(f), rng);
        frames.push(FrameRecord {
            video,
            frame: f,
            q,
            pose,
            kp3d,
            visible: det.in_frame.clone(),
            kp2d_gt: gt,
            kp2d_det: det,
        });
    }
    Ok(SequenceSample {
        video,
        intrinsics: k,
        pose,
        frames,
    })
}

/// All videos of a configuration, each from its own seeded generator.
pub fn gen_dataset(cfg: &SimConfig, chain: &KinematicChain) -> Result<Vec<SequenceSample>> {
    cfg.validate()?;
    (0..cfg.videos)
        .map(|v| gen_sequence(cfg, chain, v, &mut ChaCha8Rng::seed_from_u64(cfg.video_seed(v))))
        .collect()
}

/// Dataset contents as loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub videos: Vec<SequenceSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub magic: String,
    pub version: u32,
    pub seed: u64,
    pub config: SimConfig,
    pub chain: KinematicChain,
    pub video_count: usize,
    pub videos: Vec<VideoEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub video: usize,
    pub frames: usize,
    pub duration_s: f64,
    pub intrinsics: CameraIntrinsics,
    /// Byte offset of the video's first record, counted from the first byte
    /// after the manifest line.
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct RecordRepr {
    video: usize,
    frame: usize,
    q: Vec<f64>,
    pose: PoseSE3,
    kp3d: Vec<[f64; 3]>,
    kp2d_gt: Vec<[f64; 2]>,
    kp2d_det: Vec<[f64; 2]>,
    visible: Vec<bool>,
}

/// JSON formatter printing every float with 17 significant digits.
struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FullPrecision);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

const CHECKSUM_KEY: &str = ",\"checksum\":\"";

fn sha_hex(s: &str) -> String {
    Sha256::digest(s.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_record(r: &FrameRecord) -> Result<String> {
    let repr = RecordRepr {
        video: r.video,
        frame: r.frame,
        q: r.q.angles.clone(),
        pose: r.pose,
        kp3d: r.kp3d.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
        kp2d_gt: r.kp2d_gt.points.iter().map(|p| [p.x, p.y]).collect(),
        kp2d_det: r.kp2d_det.points.iter().map(|p| [p.x, p.y]).collect(),
        visible: r.visible.clone(),
    };
    let body = to_json_line(&repr)?;
    let sum = sha_hex(&body);
    Ok(format!("{}{CHECKSUM_KEY}{sum}\"}}", &body[..body.len() - 1]))
}

fn decode_record(line: &str, index: usize, k: &CameraIntrinsics) -> Result<FrameRecord> {
    let at = line
        .rfind(CHECKSUM_KEY)
        .ok_or_else(|| Error::Format(format!("record {index} has no checksum")))?;
    let body = format!("{}}}", &line[..at]);
    let stored = line[at + CHECKSUM_KEY.len()..].trim_end_matches("\"}");
    if sha_hex(&body) != stored {
        return Err(Error::Checksum { record: index });
    }
    let r: RecordRepr =
        serde_json::from_str(&body).map_err(|e| Error::Format(format!("record {index}: {e}")))?;
    let n = r.kp3d.len();
    if r.kp2d_gt.len() != n || r.kp2d_det.len() != n || r.visible.len() != n {
        return Err(Error::Format(format!("record {index}: keypoint counts differ")));
    }
    let kp3d = KeypointSet3D::new(r.kp3d.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect());
    let mut gt = KeypointSet2D::new(r.kp2d_gt.iter().map(|p| Vector2::new(p[0], p[1])).collect());
    gt.in_frame = gt.points.iter().map(|p| p.x != MISSING_COORD && k.contains(p)).collect();
    gt.confidence = gt.in_frame.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
    let mut det = KeypointSet2D::new(r.kp2d_det.iter().map(|p| Vector2::new(p[0], p[1])).collect());
    det.in_frame = r.visible.clone();
    det.confidence = r.visible.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
    Ok(FrameRecord {
        video: r.video,
        frame: r.frame,
        q: JointConfig::new(r.q),
        pose: r.pose,
        kp3d,
        kp2d_gt: gt,
        kp2d_det: det,
        visible: r.visible,
    })
}

/// Serializes a dataset to its on-disk text form.
pub fn dataset_to_string(videos: &[SequenceSample], cfg: &SimConfig, chain: &KinematicChain) -> Result<String> {
    let mut records = String::new();
    let mut entries = Vec::with_capacity(videos.len());
    for v in videos {
        entries.push(VideoEntry {
            video: v.video,
            frames: v.frames.len(),
            duration_s: v.frames.len() as f64 / cfg.fps,
            intrinsics: v.intrinsics,
            offset: records.len() as u64,
        });
        for f in &v.frames {
            records.push_str(&encode_record(f)?);
            records.push('\n');
        }
    }
    let manifest = DatasetManifest {
        magic: DATASET_MAGIC.into(),
        version: DATASET_VERSION,
        seed: cfg.seed,
        config: cfg.clone(),
        chain: chain.clone(),
        video_count: videos.len(),
        videos: entries,
    };
    Ok(format!("{}\n{records}", to_json_line(&manifest)?))
}

pub fn write_dataset(videos: &[SequenceSample], cfg: &SimConfig, chain: &KinematicChain, path: &Path) -> Result<()> {
    fs::write(path, dataset_to_string(videos, cfg, chain)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    parse_dataset(&fs::read_to_string(path)?)
}

/// Parses and validates the manifest, then every record against it.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let (head, body) = text
        .split_once('\n')
        .ok_or_else(|| Error::Format("missing manifest line".into()))?;
    let probe: serde_json::Value =
        serde_json::from_str(head).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if probe.get("magic").and_then(|m| m.as_str()) != Some(DATASET_MAGIC) {
        return Err(Error::Format("bad magic".into()));
    }
    if probe.get("version").and_then(|v| v.as_u64()) != Some(DATASET_VERSION as u64) {
        return Err(Error::Format("unsupported version".into()));
    }
    let manifest: DatasetManifest =
        serde_json::from_value(probe).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if manifest.video_count != manifest.videos.len() {
        return Err(Error::Format("video count disagrees with video table".into()));
    }
    if !body.is_empty() && !body.ends_with('\n') {
        return Err(Error::Format("truncated final record".into()));
    }
    let lines: Vec<&str> = body.lines().collect();
    let mut videos = Vec::with_capacity(manifest.videos.len());
    let mut index = 0;
    let mut offset = 0u64;
    for entry in &manifest.videos {
        if entry.offset != offset {
            return Err(Error::Format(format!("video {} offset mismatch", entry.video)));
        }
        let mut frames = Vec::with_capacity(entry.frames);
        for f in 0..entry.frames {
            let line = lines
                .get(index)
                .ok_or_else(|| Error::Format(format!("truncated: missing record {index}")))?;
            let r = decode_record(line, index, &entry.intrinsics)?;
            if r.video != entry.video || r.frame != f {
                return Err(Error::Format(format!("record {index} out of order")));
            }
            offset += line.len() as u64 + 1;
            index += 1;
            frames.push(r);
        }
        let pose = frames.first().map(|f| f.pose).unwrap_or_default();
        videos.push(SequenceSample {
            video: entry.video,
            intrinsics: entry.intrinsics,
            pose,
            frames,
        });
    }
    if index != lines.len() {
        return Err(Error::Format("records beyond the manifest".into()));
    }
    Ok(Dataset { manifest, videos })
}
