//! Gaussian belief maps, detection-head encoding/decoding and prior augmentation.
//!
//! Pixel `(x, y)` of a map is centred at integer coordinates, so a keypoint
//! sitting exactly on `(10.0, 10.0)` produces the value 1 at that pixel.

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, AffineMap2D, CameraIntrinsics, PoseSE3};
use crate::kinematics::{KeypointSet3D, MIN_KEYPOINTS};

/// Standard deviation of the prior jitter, pixels per axis.
pub const PRIOR_NOISE_SIGMA: f64 = 1.5;
/// Probability that a prior keypoint is dropped.
pub const PRIOR_DROP_PROB: f64 = 0.2;
/// Kernel support radius in units of sigma.
const KERNEL_RADIUS_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Side of the square network input, pixels.
    pub input_size: usize,
    /// Output stride `R` of the detection head.
    pub downsample: usize,
    /// Keypoint count `c`.
    pub keypoints: usize,
    /// Kernel variance; the exponent denominator is `2 * sigma2`.
    pub sigma2: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            input_size: 480,
            downsample: 4,
            keypoints: 7,
            sigma2: 4.0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample == 0 || self.input_size % self.downsample != 0 {
            return Err(Error::InvalidConfig(format!(
                "input size {} not divisible by stride {}",
                self.input_size, self.downsample
            )));
        }
        if self.keypoints < MIN_KEYPOINTS {
            return Err(Error::InvalidConfig(format!(
                "need at least {MIN_KEYPOINTS} keypoints, got {}",
                self.keypoints
            )));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::InvalidConfig("sigma2 must be positive".into()));
        }
        Ok(())
    }

    pub fn head_size(&self) -> usize {
        self.input_size / self.downsample
    }

    fn kernel_radius(&self) -> f64 {
        KERNEL_RADIUS_SIGMAS * self.sigma2.sqrt()
    }
}

/// Dense `channels × height × width` grid of values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Channel-major, then row-major.
    pub values: Vec<f64>,
}

impl BeliefMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        BeliefMap {
            width,
            height,
            channels,
            values: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn index(&self, channel: usize, y: usize, x: usize) -> usize {
        (channel * self.height + y) * self.width + x
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.values[self.index(channel, y, x)]
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.values[channel * n..(channel + 1) * n]
    }

    pub fn is_blank(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// 8-bit binary PGM of one channel, `value * 255` rounded.
    pub fn to_pgm(&self, channel: usize) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.channel(channel)
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    fn splat(&mut self, channel: usize, center: Vector2<f64>, sigma2: f64, radius: f64, gain: f64) {
        let n = self.width * self.height;
        let (w, h) = (self.width, self.height);
        splat_into(&mut self.values[channel * n..(channel + 1) * n], w, h, center, sigma2, radius, gain);
    }
}

/// Max-combines `gain * exp(-d² / (2 sigma2))` into one row-major plane,
/// truncated at distance `radius`.
fn splat_into(
    plane: &mut [f64],
    width: usize,
    height: usize,
    center: Vector2<f64>,
    sigma2: f64,
    radius: f64,
    gain: f64,
) {
    let denom = 2.0 * sigma2;
    let r2 = radius * radius;
    let x0 = (center.x - radius).ceil().max(0.0);
    let x1 = (center.x + radius).floor().min(width as f64 - 1.0);
    let y0 = (center.y - radius).ceil().max(0.0);
    let y1 = (center.y + radius).floor().min(height as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return;
    }
    for y in y0 as usize..=y1 as usize {
        let dy = y as f64 - center.y;
        for x in x0 as usize..=x1 as usize {
            let dx = x as f64 - center.x;
            let d2 = dx * dx + dy * dy;
            if d2 > r2 {
                continue;
            }
            let v = gain * (-d2 / denom).exp();
            let cell = &mut plane[y * width + x];
            if v > *cell {
                *cell = v;
            }
        }
    }
}

/// 2D keypoints with per-point confidence and frame membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet2D {
    pub points: Vec<Vector2<f64>>,
    pub ids: Vec<usize>,
    pub confidence: Vec<f64>,
    pub in_frame: Vec<bool>,
}

impl KeypointSet2D {
    /// All points in frame with confidence 1.
    pub fn new(points: Vec<Vector2<f64>>) -> Self {
        let n = points.len();
        KeypointSet2D {
            points,
            ids: (0..n).collect(),
            confidence: vec![1.0; n],
            in_frame: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_in_frame(&self) -> usize {
        self.in_frame.iter().filter(|&&f| f).count()
    }

    /// Applies `m` to every point; membership is recomputed against a
    /// `width × height` target when given.
    pub fn mapped(&self, m: &AffineMap2D, bounds: Option<(f64, f64)>) -> KeypointSet2D {
        let mut out = self.clone();
        for (i, p) in out.points.iter_mut().enumerate() {
            *p = m.apply(p);
            if let Some((w, h)) = bounds {
                out.in_frame[i] = out.in_frame[i] && inside(p, w, h);
            }
        }
        out
    }
}

fn inside(p: &Vector2<f64>, w: f64, h: f64) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x < w && p.y < h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    /// Network input resolution.
    Full,
    /// Detection head resolution (input / R).
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelMode {
    Single,
    PerKeypoint,
}

/// Renders keypoints as Gaussian bumps, combining overlaps by max.
pub fn render_belief(
    kps: &KeypointSet2D,
    cfg: &HeadConfig,
    resolution: Resolution,
    channels: ChannelMode,
) -> BeliefMap {
    let size = match resolution {
        Resolution::Full => cfg.input_size,
        Resolution::Head => cfg.head_size(),
    };
    let nch = match channels {
        ChannelMode::Single => 1,
        ChannelMode::PerKeypoint => cfg.keypoints,
    };
    let mut map = BeliefMap::zeros(size, size, nch);
    for (i, p) in kps.points.iter().enumerate() {
        if !kps.in_frame[i] || !p.x.is_finite() || !p.y.is_finite() {
            continue;
        }
        let ch = match channels {
            ChannelMode::Single => 0,
            ChannelMode::PerKeypoint => kps.ids[i],
        };
        if ch >= nch {
            continue;
        }
        map.splat(ch, *p, cfg.sigma2, cfg.kernel_radius(), 1.0);
    }
    map
}

/// Projects the current 3D keypoints through the previous pose estimate into
/// network-input coordinates. Points behind the camera or outside the input
/// square are flagged out of frame.
pub fn reproject_keypoints(
    pose_prev: &PoseSE3,
    points: &KeypointSet3D,
    k: &CameraIntrinsics,
    m: &AffineMap2D,
    cfg: &HeadConfig,
) -> KeypointSet2D {
    let size = cfg.input_size as f64;
    let n = points.len();
    let mut out = KeypointSet2D {
        points: Vec::with_capacity(n),
        ids: points.ids.clone(),
        confidence: vec![1.0; n],
        in_frame: vec![false; n],
    };
    for (i, p) in points.points.iter().enumerate() {
        match project(k, pose_prev, p) {
            Ok(uv) => {
                let q = m.apply(&uv);
                out.in_frame[i] = inside(&q, size, size);
                out.points.push(q);
            }
            Err(_) => {
                out.confidence[i] = 0.0;
                out.points.push(Vector2::new(f64::NAN, f64::NAN));
            }
        }
    }
    out
}

/// Single-channel, full-resolution structure-prior map.
pub fn reproject_belief(
    pose_prev: &PoseSE3,
    points: &KeypointSet3D,
    k: &CameraIntrinsics,
    m: &AffineMap2D,
    cfg: &HeadConfig,
) -> BeliefMap {
    let kps = reproject_keypoints(pose_prev, points, k, m, cfg);
    render_belief(&kps, cfg, Resolution::Full, ChannelMode::Single)
}

/// Per-keypoint heatmaps plus a shared two-channel sub-cell offset field.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHead {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Stride between head cells and input pixels.
    pub downsample: usize,
    /// `channels × height × width`.
    pub heatmaps: Vec<f64>,
    /// `2 × height × width`; channel 0 is x, channel 1 is y.
    pub offsets: Vec<f64>,
    /// Cells where the offset field is supervised (a keypoint's `p_low`).
    pub offset_mask: Vec<bool>,
}

impl DetectionHead {
    pub fn zeros(width: usize, height: usize, channels: usize, downsample: usize) -> Self {
        DetectionHead {
            width,
            height,
            channels,
            downsample,
            heatmaps: vec![0.0; channels * width * height],
            offsets: vec![0.0; 2 * width * height],
            offset_mask: vec![false; width * height],
        }
    }

    pub fn for_config(cfg: &HeadConfig) -> Self {
        let s = cfg.head_size();
        DetectionHead::zeros(s, s, cfg.keypoints, cfg.downsample)
    }

    #[inline]
    pub fn cell(&self, y: usize, x: usize) -> usize {
        y * self.width + x
    }

    pub fn heatmap(&self, channel: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.heatmaps[channel * n..(channel + 1) * n]
    }

    pub fn heatmap_mut(&mut self, channel: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.heatmaps[channel * n..(channel + 1) * n]
    }

    pub fn offset(&self, y: usize, x: usize) -> Vector2<f64> {
        let n = self.width * self.height;
        let c = self.cell(y, x);
        Vector2::new(self.offsets[c], self.offsets[n + c])
    }

    pub fn set_offset(&mut self, y: usize, x: usize, o: Vector2<f64>) {
        let n = self.width * self.height;
        let c = self.cell(y, x);
        self.offsets[c] = o.x;
        self.offsets[n + c] = o.y;
        self.offset_mask[c] = true;
    }

    /// Argmax of a channel; ties resolve to the smallest row-major index.
    pub fn peak(&self, channel: usize) -> (usize, usize, f64) {
        let hm = self.heatmap(channel);
        let mut best = 0;
        for (i, &v) in hm.iter().enumerate() {
            if v > hm[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width, hm[best])
    }

    /// Renders one keypoint (input-frame coordinates) into `channel`: a kernel
    /// around its low-resolution cell scaled by `gain`, and its sub-cell offset
    /// unless the cell already carries one and `overwrite_offset` is false.
    pub fn draw_keypoint(
        &mut self,
        channel: usize,
        p: &Vector2<f64>,
        cfg: &HeadConfig,
        gain: f64,
        overwrite_offset: bool,
    ) -> bool {
        let r = self.downsample as f64;
        let scaled = p / r;
        let low = Vector2::new(scaled.x.floor(), scaled.y.floor());
        if !(low.x >= 0.0 && low.y >= 0.0)
            || low.x >= self.width as f64
            || low.y >= self.height as f64
        {
            return false;
        }
        let (ly, lx) = (low.y as usize, low.x as usize);
        let (w, h) = (self.width, self.height);
        splat_into(self.heatmap_mut(channel), w, h, low, cfg.sigma2, cfg.kernel_radius(), gain);
        if overwrite_offset || !self.offset_mask[self.cell(ly, lx)] {
            self.set_offset(ly, lx, scaled - low);
        }
        true
    }
}

/// Ground-truth head for input-frame keypoints: kernel around `floor(p / R)`
/// in channel `id`, offset `p / R - floor(p / R)` at that cell.
pub fn encode_target(kps: &KeypointSet2D, cfg: &HeadConfig) -> DetectionHead {
    let mut head = DetectionHead::for_config(cfg);
    let size = cfg.input_size as f64;
    for (i, p) in kps.points.iter().enumerate() {
        let ch = kps.ids[i];
        if !kps.in_frame[i] || ch >= head.channels || !inside(p, size, size) {
            continue;
        }
        head.draw_keypoint(ch, p, cfg, 1.0, true);
    }
    head
}

/// Per-channel argmax refined by the offset field, mapped back to the raw
/// image through the inverse of `m`. `raw_size` bounds the in-frame test.
pub fn decode_peaks(
    head: &DetectionHead,
    m: &AffineMap2D,
    raw_size: (u32, u32),
) -> Result<KeypointSet2D> {
    let inv = m.invert()?;
    let r = head.downsample as f64;
    let (w, h) = (raw_size.0 as f64, raw_size.1 as f64);
    let mut out = KeypointSet2D {
        points: Vec::with_capacity(head.channels),
        ids: (0..head.channels).collect(),
        confidence: Vec::with_capacity(head.channels),
        in_frame: Vec::with_capacity(head.channels),
    };
    for ch in 0..head.channels {
        let (row, col, conf) = head.peak(ch);
        let refined = Vector2::new(col as f64, row as f64) + head.offset(row, col);
        let raw = inv.apply(&(refined * r));
        out.in_frame.push(inside(&raw, w, h));
        out.points.push(raw);
        out.confidence.push(conf.clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Training-time jitter of the previous-frame keypoints: Gaussian noise with
/// `PRIOR_NOISE_SIGMA` per axis, and each point independently dropped (marked
/// out of frame, zero confidence) with `PRIOR_DROP_PROB`.
pub fn augment_prior<R: Rng + ?Sized>(kps: &KeypointSet2D, rng: &mut R) -> KeypointSet2D {
    let normal = Normal::new(0.0, PRIOR_NOISE_SIGMA).expect("valid sigma");
    let mut out = kps.clone();
    for i in 0..out.len() {
        let dx = normal.sample(rng);
        let dy = normal.sample(rng);
        out.points[i] += Vector2::new(dx, dy);
        if rng.random_bool(PRIOR_DROP_PROB) {
            out.in_frame[i] = false;
            out.confidence[i] = 0.0;
        }
    }
    out
}
