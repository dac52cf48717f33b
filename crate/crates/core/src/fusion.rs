//! Temporal feature fusion network at desk scale.
//!
//! A fixed pooling encoder turns an image plus a belief map into a six-level
//! [`FeaturePyramid`]. The three finest levels of the current pyramid are
//! updated by windowed multi-head cross-attention against the previous frame
//! (queries from the previous window, keys and values from the current one),
//! the coarse levels by a per-cell MLP over both frames' features. A linear
//! decoder over all levels produces the [`DetectionHead`].
//!
//! Feature grids are stored as `(height · width) × channels` matrices with
//! cells in row-major order. Every block has a matching backward pass.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::beliefmap::{BeliefMap, DetectionHead, HeadConfig, KeypointSet2D};
use crate::error::{Error, Result};

pub const PYRAMID_LEVELS: usize = 6;
const WEIGHTS_MAGIC: &str = "sgta-weights";
const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub head: HeadConfig,
    /// Channels of the finest level; each coarser level doubles them.
    pub base_channels: usize,
    pub heads: usize,
    /// Attention window side per fine level, finest first.
    pub window_sizes: [usize; 3],
    pub attention_layers: usize,
    pub image_channels: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            head: HeadConfig::default(),
            base_channels: 16,
            heads: 4,
            window_sizes: [13, 7, 3],
            attention_layers: 3,
            image_channels: 3,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        if self.base_channels == 0 || self.heads == 0 || self.base_channels % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "{} channels cannot be split into {} heads",
                self.base_channels, self.heads
            )));
        }
        if let Some(d) = self.window_sizes.iter().find(|&&d| d % 2 == 0) {
            return Err(Error::InvalidConfig(format!("window size {d} must be odd")));
        }
        Ok(())
    }

    pub fn fine_levels(&self) -> usize {
        self.window_sizes.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Side length of the (square) grid at `level`.
    pub fn level_size(&self, level: usize) -> usize {
        let mut s = self.head.head_size();
        for _ in 0..level {
            s = s.div_ceil(2);
        }
        s
    }

    fn decoder_channels(&self) -> usize {
        self.head.keypoints + 2
    }
}

/// Network input image, channel-major like [`BeliefMap`], already normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        ImageTensor {
            width,
            height,
            channels,
            values: vec![0.0; width * height * channels],
        }
    }
}

/// Maps a `[0, 1]` image to zero mean, unit range: `(v − 0.5) / 0.5`.
pub fn normalize_image(raw: &BeliefMap) -> ImageTensor {
    ImageTensor {
        width: raw.width,
        height: raw.height,
        channels: raw.channels,
        values: raw.values.iter().map(|v| (v - 0.5) / 0.5).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    pub height: usize,
    pub width: usize,
    pub data: DMatrix<f64>,
}

impl FeatureLevel {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureLevel {
            height,
            width,
            data: DMatrix::zeros(height * width, channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    /// Row index of cell `(x, y)`.
    #[inline]
    pub fn cell(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureLevel>,
}

impl FeaturePyramid {
    pub fn zeros(cfg: &FusionConfig) -> Self {
        FeaturePyramid {
            levels: (0..PYRAMID_LEVELS)
                .map(|j| {
                    let s = cfg.level_size(j);
                    FeatureLevel::zeros(s, s, cfg.channels(j))
                })
                .collect(),
        }
    }
}

/// Keypoint cells on one pyramid level, `[x, y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterProposals {
    pub cells: Vec<[usize; 2]>,
    pub valid: Vec<bool>,
}

impl CenterProposals {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Rescales input-frame keypoints onto `level` (0 is the finest) and rounds
/// to the nearest cell. Out-of-frame keypoints are invalid.
pub fn make_proposals(kps: &KeypointSet2D, level: usize, cfg: &FusionConfig) -> CenterProposals {
    let size = cfg.level_size(level);
    let input = cfg.head.input_size as f64;
    let scale = size as f64 / input;
    let mut out = CenterProposals {
        cells: Vec::with_capacity(kps.len()),
        valid: Vec::with_capacity(kps.len()),
    };
    for (i, p) in kps.points.iter().enumerate() {
        let inside = kps.in_frame[i] && p.x >= 0.0 && p.y >= 0.0 && p.x < input && p.y < input;
        if !inside {
            out.cells.push([0, 0]);
            out.valid.push(false);
            continue;
        }
        let cx = ((p.x * scale).round() as usize).min(size - 1);
        let cy = ((p.y * scale).round() as usize).min(size - 1);
        out.cells.push([cx, cy]);
        out.valid.push(true);
    }
    out
}

/// Grid cells of the `d × d` window around `center`, row-major, `None` where
/// the window leaves the grid.
fn window_cells(level: &FeatureLevel, center: [usize; 2], d: usize) -> Vec<Option<usize>> {
    let r = (d / 2) as isize;
    let (cx, cy) = (center[0] as isize, center[1] as isize);
    let mut cells = Vec::with_capacity(d * d);
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (cx + dx, cy + dy);
            let inside = x >= 0 && y >= 0 && (x as usize) < level.width && (y as usize) < level.height;
            cells.push(inside.then(|| level.cell(x as usize, y as usize)));
        }
    }
    cells
}

/// The `d²` channel rows of the window centered at `center`, zero-padded
/// outside the grid.
pub fn extract_window(level: &FeatureLevel, center: [usize; 2], d: usize) -> DMatrix<f64> {
    gather(level, &window_cells(level, center, d))
}

fn gather(level: &FeatureLevel, cells: &[Option<usize>]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(cells.len(), level.channels());
    for (r, cell) in cells.iter().enumerate() {
        if let Some(c) = *cell {
            out.row_mut(r).copy_from(&level.data.row(c));
        }
    }
    out
}

fn scatter_add(level: &mut FeatureLevel, cells: &[Option<usize>], rows: &DMatrix<f64>) {
    for (r, cell) in cells.iter().enumerate() {
        if let Some(c) = *cell {
            let mut dst = level.data.row_mut(c);
            dst += rows.row(r);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
}

impl AttentionLayer {
    fn zeros(c: usize) -> Self {
        AttentionLayer {
            wq: DMatrix::zeros(c, c),
            wk: DMatrix::zeros(c, c),
            wv: DMatrix::zeros(c, c),
            wo: DMatrix::zeros(c, c),
        }
    }
}

/// `y = tanh(x·w1 + b1)·w2 + b2` with `2c → 2c → c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DMatrix<f64>,
}

impl Mlp {
    fn zeros(c: usize) -> Self {
        Mlp {
            w1: DMatrix::zeros(2 * c, 2 * c),
            b1: DMatrix::zeros(1, 2 * c),
            w2: DMatrix::zeros(2 * c, c),
            b2: DMatrix::zeros(1, c),
        }
    }
}

/// All trainable parameters. The same type holds their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub seed: u64,
    /// Level 0 maps the pooled input channels to `c_1`; level `j` maps
    /// `c_j → 2c_j`.
    pub encoder: Vec<DMatrix<f64>>,
    /// `[fine level][layer]`.
    pub attention: Vec<Vec<AttentionLayer>>,
    /// One per level.
    pub mlps: Vec<Mlp>,
    /// Per-level projections to `keypoints + 2` head channels.
    pub decoder: Vec<DMatrix<f64>>,
    pub decoder_bias: DMatrix<f64>,
}

impl FusionWeights {
    pub fn zeros(cfg: &FusionConfig) -> Self {
        let c = |j: usize| cfg.channels(j);
        let mut encoder = vec![DMatrix::zeros(cfg.image_channels + 1, c(0))];
        for j in 1..PYRAMID_LEVELS {
            encoder.push(DMatrix::zeros(c(j - 1), c(j)));
        }
        FusionWeights {
            seed: 0,
            encoder,
            attention: (0..cfg.fine_levels())
                .map(|m| (0..cfg.attention_layers).map(|_| AttentionLayer::zeros(c(m))).collect())
                .collect(),
            mlps: (0..PYRAMID_LEVELS).map(|j| Mlp::zeros(c(j))).collect(),
            decoder: (0..PYRAMID_LEVELS)
                .map(|j| DMatrix::zeros(c(j), cfg.decoder_channels()))
                .collect(),
            decoder_bias: DMatrix::zeros(1, cfg.decoder_channels()),
        }
    }

    /// Seeded Gaussian initialization scaled by fan-in; biases start at zero.
    pub fn init(cfg: &FusionConfig, seed: u64) -> Self {
        let mut w = FusionWeights::zeros(cfg);
        w.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in w.tensors_mut() {
            if name.ends_with(".b1") || name.ends_with(".b2") || name == "decoder.bias" {
                continue;
            }
            let gain = if name.starts_with("decoder") { 0.1 } else { 1.0 };
            let n = Normal::new(0.0, gain / (t.nrows() as f64).sqrt()).expect("positive std");
            t.iter_mut().for_each(|v| *v = n.sample(&mut rng));
        }
        w
    }

    /// Parameter tensors in a fixed order with stable names.
    pub fn tensors(&self) -> Vec<(String, &DMatrix<f64>)> {
        let mut out = Vec::new();
        for (j, e) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{j}"), e));
        }
        for (m, layers) in self.attention.iter().enumerate() {
            for (l, a) in layers.iter().enumerate() {
                for (k, t) in [("wq", &a.wq), ("wk", &a.wk), ("wv", &a.wv), ("wo", &a.wo)] {
                    out.push((format!("attention.{m}.{l}.{k}"), t));
                }
            }
        }
        for (j, mlp) in self.mlps.iter().enumerate() {
            for (k, t) in [("w1", &mlp.w1), ("b1", &mlp.b1), ("w2", &mlp.w2), ("b2", &mlp.b2)] {
                out.push((format!("mlp.{j}.{k}"), t));
            }
        }
        for (j, d) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.{j}"), d));
        }
        out.push(("decoder.bias".to_string(), &self.decoder_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut DMatrix<f64>)> {
        let mut out = Vec::new();
        for (j, e) in self.encoder.iter_mut().enumerate() {
            out.push((format!("encoder.{j}"), e));
        }
        for (m, layers) in self.attention.iter_mut().enumerate() {
            for (l, a) in layers.iter_mut().enumerate() {
                let AttentionLayer { wq, wk, wv, wo } = a;
                for (k, t) in [("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)] {
                    out.push((format!("attention.{m}.{l}.{k}"), t));
                }
            }
        }
        for (j, mlp) in self.mlps.iter_mut().enumerate() {
            let Mlp { w1, b1, w2, b2 } = mlp;
            for (k, t) in [("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)] {
                out.push((format!("mlp.{j}.{k}"), t));
            }
        }
        for (j, d) in self.decoder.iter_mut().enumerate() {
            out.push((format!("decoder.{j}"), d));
        }
        out.push(("decoder.bias".to_string(), &mut self.decoder_bias));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn accumulate(&mut self, other: &FusionWeights) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }
}

#[derive(Serialize, Deserialize)]
struct WeightsHeader {
    magic: String,
    version: u32,
    seed: u64,
    config: FusionConfig,
    tensors: Vec<TensorShape>,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct TensorShape {
    name: String,
    rows: usize,
    cols: usize,
}

/// Writes a one-line JSON header followed by every tensor as little-endian
/// `f64`s, row-major.
pub fn write_weights(w: &FusionWeights, cfg: &FusionConfig, path: &Path) -> Result<()> {
    let tensors = w.tensors();
    let header = WeightsHeader {
        magic: WEIGHTS_MAGIC.into(),
        version: WEIGHTS_VERSION,
        seed: w.seed,
        config: *cfg,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorShape {
                name: name.clone(),
                rows: t.nrows(),
                cols: t.ncols(),
            })
            .collect(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    for (_, t) in &tensors {
        for r in 0..t.nrows() {
            for c in 0..t.ncols() {
                buf.extend_from_slice(&t[(r, c)].to_le_bytes());
            }
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<(FusionWeights, FusionConfig)> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: WeightsHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Format(format!("weights header: {e}")))?;
    if header.magic != WEIGHTS_MAGIC {
        return Err(Error::Format("not a weights file".into()));
    }
    if header.version != WEIGHTS_VERSION {
        return Err(Error::Format("unsupported version".into()));
    }
    header.config.validate()?;
    let mut w = FusionWeights::zeros(&header.config);
    w.seed = header.seed;
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;
    let mut chunks = body.chunks_exact(8);
    let mut tensors = w.tensors_mut();
    if tensors.len() != header.tensors.len() {
        return Err(Error::Format("tensor count does not match configuration".into()));
    }
    for ((name, t), shape) in tensors.iter_mut().zip(&header.tensors) {
        if *name != shape.name || t.nrows() != shape.rows || t.ncols() != shape.cols {
            return Err(Error::Format(format!("unexpected tensor {}", shape.name)));
        }
        for r in 0..shape.rows {
            for c in 0..shape.cols {
                let bytes = chunks.next().ok_or_else(|| Error::Format("truncated weights".into()))?;
                t[(r, c)] = f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"));
            }
        }
    }
    if chunks.next().is_some() || !chunks.remainder().is_empty() {
        return Err(Error::Format("trailing bytes after weights".into()));
    }
    Ok((w, header.config))
}

fn add_bias(m: &mut DMatrix<f64>, b: &DMatrix<f64>) {
    for j in 0..m.ncols() {
        m.column_mut(j).add_scalar_mut(b[(0, j)]);
    }
}

fn column_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, m.ncols(), |_, j| m.column(j).sum())
}

/// `dz = dy ⊙ (1 − y²)` for `y = tanh(z)`.
fn tanh_backward(y: &DMatrix<f64>, dy: &DMatrix<f64>) -> DMatrix<f64> {
    dy.zip_map(y, |g, v| g * (1.0 - v * v))
}

fn check_input(img: &ImageTensor, belief: &BeliefMap, cfg: &FusionConfig) -> Result<()> {
    let n = cfg.head.input_size;
    if (img.width, img.height, img.channels) != (n, n, cfg.image_channels) {
        return Err(Error::SizeMismatch {
            expected: format!("{}x{n}x{n}", cfg.image_channels),
            actual: format!("{}x{}x{}", img.channels, img.height, img.width),
        });
    }
    if (belief.width, belief.height, belief.channels) != (n, n, 1) {
        return Err(Error::SizeMismatch {
            expected: format!("1x{n}x{n}"),
            actual: format!("{}x{}x{}", belief.channels, belief.height, belief.width),
        });
    }
    Ok(())
}

/// Average of each `R × R` block of the stacked image and belief channels.
fn pool_input(img: &ImageTensor, belief: &BeliefMap, cfg: &FusionConfig) -> DMatrix<f64> {
    let r = cfg.head.downsample;
    let s = cfg.head.head_size();
    let n = cfg.head.input_size;
    let mut out = DMatrix::zeros(s * s, img.channels + 1);
    let planes = (0..img.channels)
        .map(|c| &img.values[c * n * n..(c + 1) * n * n])
        .chain(std::iter::once(&belief.values[..]));
    let norm = 1.0 / (r * r) as f64;
    for (c, plane) in planes.enumerate() {
        let mut col = out.column_mut(c);
        for y in 0..n {
            let row = &plane[y * n..(y + 1) * n];
            let base = (y / r) * s;
            for (x, v) in row.iter().enumerate() {
                col[base + x / r] += v * norm;
            }
        }
    }
    out
}

/// 2×2 average pooling with ceil-sized output; edge blocks average the cells
/// they cover.
fn pool2(level: &FeatureLevel) -> FeatureLevel {
    let (h, w) = (level.height.div_ceil(2), level.width.div_ceil(2));
    let mut out = FeatureLevel::zeros(h, w, level.channels());
    let counts = pool_counts(level);
    for c in 0..level.channels() {
        let src = level.data.column(c);
        let mut dst = out.data.column_mut(c);
        for y in 0..level.height {
            for x in 0..level.width {
                let d = (y / 2) * w + x / 2;
                dst[d] += src[y * level.width + x] / counts[d];
            }
        }
    }
    out
}

fn pool_counts(level: &FeatureLevel) -> Vec<f64> {
    let w = level.width.div_ceil(2);
    let mut counts = vec![0.0; w * level.height.div_ceil(2)];
    for y in 0..level.height {
        for x in 0..level.width {
            counts[(y / 2) * w + x / 2] += 1.0;
        }
    }
    counts
}

fn pool2_backward(level: &FeatureLevel, d_pooled: &DMatrix<f64>) -> DMatrix<f64> {
    let counts = pool_counts(level);
    let w = level.width.div_ceil(2);
    let mut out = DMatrix::zeros(level.data.nrows(), level.channels());
    for c in 0..level.channels() {
        let src = d_pooled.column(c);
        let mut dst = out.column_mut(c);
        for y in 0..level.height {
            for x in 0..level.width {
                let s = (y / 2) * w + x / 2;
                dst[y * level.width + x] = src[s] / counts[s];
            }
        }
    }
    out
}

/// Level 0 is `tanh(pool_R(image ⊕ belief) · W_0)`, each further level
/// `tanh(pool_2(f_j) · W_j)`.
pub fn encode_pyramid(
    img: &ImageTensor,
    belief: &BeliefMap,
    w: &FusionWeights,
    cfg: &FusionConfig,
) -> Result<FeaturePyramid> {
    check_input(img, belief, cfg)?;
    let s = cfg.head.head_size();
    let x0 = pool_input(img, belief, cfg);
    let mut levels = vec![FeatureLevel {
        height: s,
        width: s,
        data: (x0 * &w.encoder[0]).map(f64::tanh),
    }];
    for j in 1..PYRAMID_LEVELS {
        let pooled = pool2(&levels[j - 1]);
        levels.push(FeatureLevel {
            data: (pooled.data * &w.encoder[j]).map(f64::tanh),
            ..pooled
        });
    }
    Ok(FeaturePyramid { levels })
}

/// Encoder weight gradients given the gradient of a scalar loss with respect
/// to every level of the pyramid.
pub fn encode_backward(
    img: &ImageTensor,
    belief: &BeliefMap,
    w: &FusionWeights,
    cfg: &FusionConfig,
    grad: &FeaturePyramid,
) -> Result<Vec<DMatrix<f64>>> {
    let pyr = encode_pyramid(img, belief, w, cfg)?;
    let mut dw: Vec<DMatrix<f64>> = w.encoder.iter().map(|e| DMatrix::zeros(e.nrows(), e.ncols())).collect();
    let mut d_level = grad.levels[PYRAMID_LEVELS - 1].data.clone();
    for j in (1..PYRAMID_LEVELS).rev() {
        let dz = tanh_backward(&pyr.levels[j].data, &d_level);
        let pooled = pool2(&pyr.levels[j - 1]);
        dw[j] = pooled.data.transpose() * &dz;
        let d_pooled = dz * w.encoder[j].transpose();
        d_level = &grad.levels[j - 1].data + pool2_backward(&pyr.levels[j - 1], &d_pooled);
    }
    let dz = tanh_backward(&pyr.levels[0].data, &d_level);
    dw[0] = pool_input(img, belief, cfg).transpose() * dz;
    Ok(dw)
}

fn softmax_rows(s: &DMatrix<f64>) -> DMatrix<f64> {
    // columns are contiguous, so normalize the transpose column by column
    let mut p = s.transpose();
    for mut col in p.column_iter_mut() {
        let m = col.max();
        let mut z = 0.0;
        for v in col.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        col /= z;
    }
    p.transpose()
}

/// Per-head attention of projected queries over projected keys and values.
/// Returns the softmax weights of each head and the concatenated head outputs
/// (before the output projection).
pub fn attend(
    qp: &DMatrix<f64>,
    kp: &DMatrix<f64>,
    vp: &DMatrix<f64>,
    heads: usize,
) -> (Vec<DMatrix<f64>>, DMatrix<f64>) {
    let c = qp.ncols();
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = DMatrix::zeros(qp.nrows(), c);
    let probs = (0..heads)
        .map(|h| {
            let q = qp.columns(h * dh, dh).into_owned();
            let k = kp.columns(h * dh, dh).transpose();
            let s = q * k * scale;
            let p = softmax_rows(&s);
            out.columns_mut(h * dh, dh).copy_from(&(&p * vp.columns(h * dh, dh)));
            p
        })
        .collect();
    (probs, out)
}

fn check_attention(q: &DMatrix<f64>, kv: &DMatrix<f64>, layers: &[AttentionLayer], heads: usize) -> Result<()> {
    let c = q.ncols();
    if heads == 0 || c % heads != 0 {
        return Err(Error::ShapeMismatch(format!("{c} channels not divisible by {heads} heads")));
    }
    if kv.ncols() != c {
        return Err(Error::ShapeMismatch(format!("query width {c}, key width {}", kv.ncols())));
    }
    if let Some(l) = layers.iter().find(|l| l.wq.shape() != (c, c)) {
        return Err(Error::ShapeMismatch(format!("projection {:?} for width {c}", l.wq.shape())));
    }
    Ok(())
}

/// Stacked cross-attention layers `q ← q + attend(q·Wq, kv·Wk, kv·Wv)·Wo`.
/// Keys and values stay fixed across layers.
pub fn cross_attention_block(
    q: &DMatrix<f64>,
    kv: &DMatrix<f64>,
    layers: &[AttentionLayer],
    heads: usize,
) -> Result<DMatrix<f64>> {
    check_attention(q, kv, layers, heads)?;
    let mut x = q.clone();
    for l in layers {
        let (_, o) = attend(&(&x * &l.wq), &(kv * &l.wk), &(kv * &l.wv), heads);
        x += o * &l.wo;
    }
    Ok(x)
}

pub struct AttentionGrad {
    pub d_query: DMatrix<f64>,
    pub d_kv: DMatrix<f64>,
    pub layers: Vec<AttentionLayer>,
}

pub fn cross_attention_backward(
    q: &DMatrix<f64>,
    kv: &DMatrix<f64>,
    layers: &[AttentionLayer],
    heads: usize,
    d_out: &DMatrix<f64>,
) -> Result<AttentionGrad> {
    check_attention(q, kv, layers, heads)?;
    let c = q.ncols();
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut inputs = Vec::with_capacity(layers.len());
    let mut x = q.clone();
    for l in layers {
        inputs.push(x.clone());
        let (_, o) = attend(&(&x * &l.wq), &(kv * &l.wk), &(kv * &l.wv), heads);
        x += o * &l.wo;
    }
    let kvt = kv.transpose();
    let mut d_kv = DMatrix::zeros(kv.nrows(), c);
    let mut grads: Vec<AttentionLayer> = layers.iter().map(|_| AttentionLayer::zeros(c)).collect();
    let mut dx = d_out.clone();
    for (i, l) in layers.iter().enumerate().rev() {
        let xi = &inputs[i];
        let (qp, kp, vp) = (xi * &l.wq, kv * &l.wk, kv * &l.wv);
        let (probs, o) = attend(&qp, &kp, &vp, heads);
        let g = &mut grads[i];
        g.wo = o.transpose() * &dx;
        let d_o = &dx * l.wo.transpose();
        let mut d_qp = DMatrix::zeros(qp.nrows(), c);
        let mut d_kp = DMatrix::zeros(kp.nrows(), c);
        let mut d_vp = DMatrix::zeros(vp.nrows(), c);
        for (h, p) in probs.iter().enumerate() {
            let d_oh = d_o.columns(h * dh, dh);
            let d_p = d_oh * vp.columns(h * dh, dh).transpose();
            d_vp.columns_mut(h * dh, dh).copy_from(&(p.transpose() * d_oh));
            let mut d_s = p.component_mul(&d_p);
            for (r, mut row) in d_s.row_iter_mut().enumerate() {
                let dot = row.sum();
                row.zip_apply(&p.row(r), |v, pr| *v -= pr * dot);
            }
            d_qp.columns_mut(h * dh, dh).copy_from(&(&d_s * kp.columns(h * dh, dh) * scale));
            d_kp.columns_mut(h * dh, dh).copy_from(&(d_s.transpose() * qp.columns(h * dh, dh) * scale));
        }
        g.wq = xi.transpose() * &d_qp;
        g.wk = &kvt * &d_kp;
        g.wv = &kvt * &d_vp;
        d_kv += &d_kp * l.wk.transpose() + &d_vp * l.wv.transpose();
        dx += d_qp * l.wq.transpose();
    }
    Ok(AttentionGrad {
        d_query: dx,
        d_kv,
        layers: grads,
    })
}

/// Returns the hidden activations and the output.
fn mlp_forward(x: &DMatrix<f64>, mlp: &Mlp) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut z = x * &mlp.w1;
    add_bias(&mut z, &mlp.b1);
    let h = z.map(f64::tanh);
    let mut y = &h * &mlp.w2;
    add_bias(&mut y, &mlp.b2);
    (h, y)
}

fn mlp_backward(x: &DMatrix<f64>, mlp: &Mlp, h: &DMatrix<f64>, dy: &DMatrix<f64>, g: &mut Mlp) -> DMatrix<f64> {
    g.w2 += h.transpose() * dy;
    g.b2 += column_sums(dy);
    let dz = tanh_backward(h, &(dy * mlp.w2.transpose()));
    g.w1 += x.transpose() * &dz;
    g.b1 += column_sums(&dz);
    dz * mlp.w1.transpose()
}

fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// One keypoint's fusion on one level: which cells of `f_prev` feed the
/// queries, which cells of `f_cur` the keys/values and receive the result.
struct FusionSite {
    prev_cells: Vec<Option<usize>>,
    cur_cells: Vec<Option<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FusionKind {
    Attention,
    Concat,
}

fn sites(
    f_prev: &FeatureLevel,
    f_cur: &FeatureLevel,
    prev: &CenterProposals,
    cur: &CenterProposals,
    window: usize,
) -> Vec<FusionSite> {
    (0..cur.len().min(prev.len()))
        .filter(|&k| prev.valid[k] && cur.valid[k])
        .map(|k| FusionSite {
            prev_cells: window_cells(f_prev, prev.cells[k], window),
            cur_cells: window_cells(f_cur, cur.cells[k], window),
        })
        .collect()
}

fn site_input(
    kind: FusionKind,
    site: &FusionSite,
    f_prev: &FeatureLevel,
    f_cur: &FeatureLevel,
    attention: &[AttentionLayer],
    heads: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let q = gather(f_prev, &site.prev_cells);
    let kv = gather(f_cur, &site.cur_cells);
    let first = match kind {
        FusionKind::Attention => cross_attention_block(&q, &kv, attention, heads)?,
        FusionKind::Concat => q.clone(),
    };
    Ok((hstack(&first, &kv), q, kv))
}

fn fuse_level(
    kind: FusionKind,
    f_prev: &FeatureLevel,
    f_cur: &FeatureLevel,
    sites: &[FusionSite],
    attention: &[AttentionLayer],
    mlp: &Mlp,
    heads: usize,
) -> Result<FeatureLevel> {
    let mut out = f_cur.clone();
    if sites.is_empty() {
        return Ok(out);
    }
    // rows are independent through the MLP, so all sites go through at once
    let inputs = sites
        .iter()
        .map(|site| site_input(kind, site, f_prev, f_cur, attention, heads).map(|(x, _, _)| x))
        .collect::<Result<Vec<_>>>()?;
    let rows: usize = inputs.iter().map(|x| x.nrows()).sum();
    let mut x = DMatrix::zeros(rows, inputs[0].ncols());
    let mut offset = 0;
    for xi in &inputs {
        x.rows_mut(offset, xi.nrows()).copy_from(xi);
        offset += xi.nrows();
    }
    let (_, y) = mlp_forward(&x, mlp);
    let mut offset = 0;
    for site in sites {
        for (r, cell) in site.cur_cells.iter().enumerate() {
            if let Some(c) = *cell {
                out.data.row_mut(c).copy_from(&y.row(offset + r));
            }
        }
        offset += site.cur_cells.len();
    }
    Ok(out)
}

pub struct LevelGrad {
    pub d_prev: DMatrix<f64>,
    pub d_cur: DMatrix<f64>,
    pub attention: Vec<AttentionLayer>,
    pub mlp: Mlp,
}

#[allow(clippy::too_many_arguments)]
fn fuse_level_backward(
    kind: FusionKind,
    f_prev: &FeatureLevel,
    f_cur: &FeatureLevel,
    sites: &[FusionSite],
    attention: &[AttentionLayer],
    mlp: &Mlp,
    heads: usize,
    d_out: &DMatrix<f64>,
) -> Result<LevelGrad> {
    let c = f_cur.channels();
    // the last site writing a cell owns its gradient
    let mut owner = vec![None; f_cur.data.nrows()];
    for (s, site) in sites.iter().enumerate() {
        for (r, cell) in site.cur_cells.iter().enumerate() {
            if let Some(cell) = *cell {
                owner[cell] = Some((s, r));
            }
        }
    }
    let mut d_cur = d_out.clone();
    for (cell, o) in owner.iter().enumerate() {
        if o.is_some() {
            d_cur.row_mut(cell).fill(0.0);
        }
    }
    let mut d_prev = FeatureLevel::zeros(f_prev.height, f_prev.width, c);
    let mut d_cur_level = FeatureLevel {
        height: f_cur.height,
        width: f_cur.width,
        data: d_cur,
    };
    let mut g_att: Vec<AttentionLayer> = attention.iter().map(|_| AttentionLayer::zeros(c)).collect();
    let mut g_mlp = Mlp::zeros(c);
    for (s, site) in sites.iter().enumerate() {
        let mut dy = DMatrix::zeros(site.cur_cells.len(), c);
        for (r, cell) in site.cur_cells.iter().enumerate() {
            if let Some(cell) = *cell {
                if owner[cell] == Some((s, r)) {
                    dy.row_mut(r).copy_from(&d_out.row(cell));
                }
            }
        }
        let (x, q, kv) = site_input(kind, site, f_prev, f_cur, attention, heads)?;
        let (h, _) = mlp_forward(&x, mlp);
        let dx = mlp_backward(&x, mlp, &h, &dy, &mut g_mlp);
        let d_first = dx.columns(0, c).into_owned();
        let mut d_kv = dx.columns(c, c).into_owned();
        let d_q = match kind {
            FusionKind::Attention => {
                let g = cross_attention_backward(&q, &kv, attention, heads, &d_first)?;
                d_kv += g.d_kv;
                for (acc, l) in g_att.iter_mut().zip(&g.layers) {
                    acc.wq += &l.wq;
                    acc.wk += &l.wk;
                    acc.wv += &l.wv;
                    acc.wo += &l.wo;
                }
                g.d_query
            }
            FusionKind::Concat => d_first,
        };
        scatter_add(&mut d_prev, &site.prev_cells, &d_q);
        scatter_add(&mut d_cur_level, &site.cur_cells, &d_kv);
    }
    Ok(LevelGrad {
        d_prev: d_prev.data,
        d_cur: d_cur_level.data,
        attention: g_att,
        mlp: g_mlp,
    })
}

/// Windowed attention fusion on fine level `m`: for each keypoint valid in
/// both frames (ascending id), the attention output over its windows is
/// concatenated with the current window, passed through the level MLP and
/// written back over the window cells. Later ids win on overlaps.
#[allow(clippy::too_many_arguments)]
pub fn fuse_fine(
    m: usize,
    f_prev: &FeatureLevel,
    f_cur: &FeatureLevel,
    prev: &CenterProposals,
    cur: &CenterProposals,
    cfg: &FusionConfig,
    w: &FusionWeights,
) -> Result<FeatureLevel> {
    let s = sites(f_prev, f_cur, prev, cur, cfg.window_sizes[m]);
    fuse_level(FusionKind::Attention, f_prev, f_cur, &s, &w.attention[m], &w.mlps[m], cfg.heads)
}

/// Per-cell fusion on level `n`: features at each keypoint's proposal cell in
/// both frames are concatenated and mapped by the level MLP onto the current
/// cell.
pub fn fuse_coarse(
    n: usize,
    f_prev: &FeatureLevel,
    f_cur: &FeatureLevel,
    prev: &CenterProposals,
    cur: &CenterProposals,
    w: &FusionWeights,
) -> Result<FeatureLevel> {
    let s = sites(f_prev, f_cur, prev, cur, 1);
    fuse_level(FusionKind::Concat, f_prev, f_cur, &s, &[], &w.mlps[n], 1)
}

fn level_plan<'a>(
    j: usize,
    tca: bool,
    cfg: &FusionConfig,
    w: &'a FusionWeights,
) -> (FusionKind, usize, &'a [AttentionLayer]) {
    if tca && j < cfg.fine_levels() {
        (FusionKind::Attention, cfg.window_sizes[j], &w.attention[j])
    } else {
        (FusionKind::Concat, 1, &[])
    }
}

/// Fuses every level of `cur` against `prev`. With `tca` off all levels use
/// the per-cell concatenation path.
pub fn fuse_pyramid(
    prev: &FeaturePyramid,
    cur: &FeaturePyramid,
    prev_props: &[CenterProposals],
    cur_props: &[CenterProposals],
    tca: bool,
    cfg: &FusionConfig,
    w: &FusionWeights,
) -> Result<FeaturePyramid> {
    let levels = (0..PYRAMID_LEVELS)
        .map(|j| {
            let (kind, d, att) = level_plan(j, tca, cfg, w);
            let (fp, fc) = (&prev.levels[j], &cur.levels[j]);
            let s = sites(fp, fc, &prev_props[j], &cur_props[j], d);
            fuse_level(kind, fp, fc, &s, att, &w.mlps[j], cfg.heads)
        })
        .collect::<Result<_>>()?;
    Ok(FeaturePyramid { levels })
}

pub struct FusionGrad {
    pub weights: FusionWeights,
    pub d_prev: FeaturePyramid,
    pub d_cur: FeaturePyramid,
}

/// Gradients of a scalar loss through [`fuse_pyramid`], given its gradient
/// with respect to the fused pyramid. Only attention and MLP entries of
/// `weights` are populated.
#[allow(clippy::too_many_arguments)]
pub fn fusion_backward(
    prev: &FeaturePyramid,
    cur: &FeaturePyramid,
    prev_props: &[CenterProposals],
    cur_props: &[CenterProposals],
    tca: bool,
    cfg: &FusionConfig,
    w: &FusionWeights,
    d_fused: &FeaturePyramid,
) -> Result<FusionGrad> {
    let mut g = FusionWeights::zeros(cfg);
    g.seed = w.seed;
    let mut d_prev = FeaturePyramid::zeros(cfg);
    let mut d_cur = FeaturePyramid::zeros(cfg);
    for j in 0..PYRAMID_LEVELS {
        let (kind, d, att) = level_plan(j, tca, cfg, w);
        let (fp, fc) = (&prev.levels[j], &cur.levels[j]);
        let s = sites(fp, fc, &prev_props[j], &cur_props[j], d);
        let lg = fuse_level_backward(kind, fp, fc, &s, att, &w.mlps[j], cfg.heads, &d_fused.levels[j].data)?;
        d_prev.levels[j].data = lg.d_prev;
        d_cur.levels[j].data = lg.d_cur;
        if kind == FusionKind::Attention {
            g.attention[j] = lg.attention;
        }
        g.mlps[j] = lg.mlp;
    }
    Ok(FusionGrad {
        weights: g,
        d_prev,
        d_cur,
    })
}

/// For each finest-level cell, the row of the coarser level covering it.
fn parent_cell(cfg: &FusionConfig, level: usize, cell: usize) -> usize {
    let s0 = cfg.level_size(0);
    let (y, x) = (cell / s0, cell % s0);
    (y >> level) * cfg.level_size(level) + (x >> level)
}

/// Sum of per-level linear projections, nearest-upsampled to the finest
/// level, plus bias; logistic on the heatmap channels, linear offsets.
fn decoder_logits(pyr: &FeaturePyramid, w: &FusionWeights, cfg: &FusionConfig) -> DMatrix<f64> {
    let s0 = cfg.level_size(0);
    let mut g = DMatrix::zeros(s0 * s0, cfg.decoder_channels());
    add_bias(&mut g, &w.decoder_bias);
    for (j, level) in pyr.levels.iter().enumerate() {
        let z = &level.data * &w.decoder[j];
        if j == 0 {
            g += z;
            continue;
        }
        for cell in 0..s0 * s0 {
            let mut row = g.row_mut(cell);
            row += z.row(parent_cell(cfg, j, cell));
        }
    }
    g
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn decode_head(pyr: &FeaturePyramid, w: &FusionWeights, cfg: &FusionConfig) -> DetectionHead {
    let g = decoder_logits(pyr, w, cfg);
    let mut head = DetectionHead::for_config(&cfg.head);
    let k = cfg.head.keypoints;
    let n = g.nrows();
    for ch in 0..k {
        for (cell, v) in g.column(ch).iter().enumerate() {
            head.heatmaps[ch * n + cell] = logistic(*v);
        }
    }
    for axis in 0..2 {
        head.offsets[axis * n..(axis + 1) * n].copy_from_slice(g.column(k + axis).as_slice());
    }
    head
}

/// Decoder weight gradients and the gradient with respect to the pyramid,
/// given gradients over the head's heatmaps and offsets.
pub fn decode_backward(
    pyr: &FeaturePyramid,
    w: &FusionWeights,
    cfg: &FusionConfig,
    d_heatmaps: &[f64],
    d_offsets: &[f64],
) -> (Vec<DMatrix<f64>>, DMatrix<f64>, FeaturePyramid) {
    let head = decode_head(pyr, w, cfg);
    let k = cfg.head.keypoints;
    let s0 = cfg.level_size(0);
    let n = s0 * s0;
    let mut dg = DMatrix::zeros(n, cfg.decoder_channels());
    for ch in 0..k {
        for cell in 0..n {
            let y = head.heatmaps[ch * n + cell];
            dg[(cell, ch)] = d_heatmaps[ch * n + cell] * y * (1.0 - y);
        }
    }
    for axis in 0..2 {
        dg.column_mut(k + axis).copy_from_slice(&d_offsets[axis * n..(axis + 1) * n]);
    }
    let d_bias = column_sums(&dg);
    let mut d_dec = Vec::with_capacity(PYRAMID_LEVELS);
    let mut d_pyr = FeaturePyramid::zeros(cfg);
    for (j, level) in pyr.levels.iter().enumerate() {
        let dz = if j == 0 {
            dg.clone()
        } else {
            let mut dz = DMatrix::zeros(level.data.nrows(), dg.ncols());
            for cell in 0..n {
                let mut row = dz.row_mut(parent_cell(cfg, j, cell));
                row += dg.row(cell);
            }
            dz
        };
        d_dec.push(level.data.transpose() * &dz);
        d_pyr.levels[j].data = dz * w.decoder[j].transpose();
    }
    (d_dec, d_bias, d_pyr)
}

/// Everything the network sees for one frame pair, in the input frame.
pub struct NetworkInput<'a> {
    pub prev_image: &'a ImageTensor,
    pub prev_belief: &'a BeliefMap,
    pub cur_image: &'a ImageTensor,
    pub cur_belief: &'a BeliefMap,
    /// Keypoints behind the previous belief map (query centers).
    pub prev_keypoints: &'a KeypointSet2D,
    /// Keypoints behind the current belief map (key/value centers).
    pub cur_keypoints: &'a KeypointSet2D,
}

fn all_proposals(kps: &KeypointSet2D, cfg: &FusionConfig) -> Vec<CenterProposals> {
    (0..PYRAMID_LEVELS).map(|j| make_proposals(kps, j, cfg)).collect()
}

/// Encode both frames, fuse, decode.
pub fn run_network(
    input: &NetworkInput,
    tca: bool,
    cfg: &FusionConfig,
    w: &FusionWeights,
) -> Result<DetectionHead> {
    let prev = encode_pyramid(input.prev_image, input.prev_belief, w, cfg)?;
    let cur = encode_pyramid(input.cur_image, input.cur_belief, w, cfg)?;
    let pp = all_proposals(input.prev_keypoints, cfg);
    let cp = all_proposals(input.cur_keypoints, cfg);
    let fused = fuse_pyramid(&prev, &cur, &pp, &cp, tca, cfg, w)?;
    Ok(decode_head(&fused, w, cfg))
}

/// Gradient of a scalar loss with respect to every weight, given the loss
/// gradient over the head produced by [`run_network`].
pub fn network_backward(
    input: &NetworkInput,
    tca: bool,
    cfg: &FusionConfig,
    w: &FusionWeights,
    d_heatmaps: &[f64],
    d_offsets: &[f64],
) -> Result<FusionWeights> {
    let prev = encode_pyramid(input.prev_image, input.prev_belief, w, cfg)?;
    let cur = encode_pyramid(input.cur_image, input.cur_belief, w, cfg)?;
    let pp = all_proposals(input.prev_keypoints, cfg);
    let cp = all_proposals(input.cur_keypoints, cfg);
    let fused = fuse_pyramid(&prev, &cur, &pp, &cp, tca, cfg, w)?;
    let (d_dec, d_bias, d_fused) = decode_backward(&fused, w, cfg, d_heatmaps, d_offsets);
    let fg = fusion_backward(&prev, &cur, &pp, &cp, tca, cfg, w, &d_fused)?;
    let mut g = fg.weights;
    g.decoder = d_dec;
    g.decoder_bias = d_bias;
    let e_prev = encode_backward(input.prev_image, input.prev_belief, w, cfg, &fg.d_prev)?;
    let e_cur = encode_backward(input.cur_image, input.cur_belief, w, cfg, &fg.d_cur)?;
    for (j, (a, b)) in e_prev.into_iter().zip(e_cur).enumerate() {
        g.encoder[j] = a + b;
    }
    Ok(g)
}

/// One plain gradient-descent step, `w ← w − lr · g`.
pub fn sgd_step(w: &mut FusionWeights, g: &FusionWeights, lr: f64) {
    let mut scaled = g.clone();
    for (_, t) in scaled.tensors_mut() {
        *t *= -lr;
    }
    w.accumulate(&scaled);
}
