//! Camera-to-robot pose solving.
//!
//! The flow for one frame is: linear DLT inside a RANSAC loop gives an
//! initial pose, every keypoint is reprojected through it, the reprojection
//! residuals become per-keypoint weights, and a damped Gauss-Newton (LM) solve
//! minimises `½ Σ ‖ω_i (π(R P_i + T) − p_i)‖²` starting from the initial pose.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix4, SMatrix, SVector, Vector2, Vector3, Vector4};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beliefmap::KeypointSet2D;
use crate::error::{Error, Result};
use crate::geometry::{nearest_rotation, so3_exp, so3_exp_minus_identity, skew, CameraIntrinsics, PoseSE3, MIN_DEPTH};
use crate::kinematics::{KeypointSet3D, MIN_KEYPOINTS};

/// Residual assigned per axis to a point that falls behind the camera.
pub const BEHIND_CAMERA_RESIDUAL: f64 = 1e3;
/// Exponent factor of the reprojection weights.
pub const WEIGHT_FACTOR: f64 = 5.0;
const MIN_WEIGHT_SCALE: f64 = 1e-6;
const DLT_RANK_TOL: f64 = 1e-10;
const MIN_LM_POINTS: usize = 4;
const MIN_LM_WEIGHT: f64 = 1e-6;

/// One 2D-3D pair: pixel in the raw image, point in the robot base frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub image: Vector2<f64>,
    pub world: Vector3<f64>,
    pub id: usize,
}

/// Pairs every in-frame detection with the 3D keypoint of the same id.
pub fn correspondences(detections: &KeypointSet2D, points: &KeypointSet3D) -> Result<Vec<Correspondence>> {
    let mut out = Vec::with_capacity(detections.len());
    for (i, p) in detections.points.iter().enumerate() {
        if !detections.in_frame[i] {
            continue;
        }
        let id = detections.ids[i];
        let j = points
            .ids
            .iter()
            .position(|&k| k == id)
            .ok_or_else(|| Error::IdMismatch(format!("detection id {id} has no 3D keypoint")))?;
        out.push(Correspondence {
            image: *p,
            world: points.points[j],
            id,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier threshold on reprojection error, pixels.
    pub inlier_threshold: f64,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations: 200,
            inlier_threshold: 2.0,
            sample_size: MIN_KEYPOINTS,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || !(self.inlier_threshold > 0.0) || self.sample_size < MIN_KEYPOINTS {
            return Err(Error::InvalidConfig(format!("bad RANSAC config {self:?}")));
        }
        Ok(())
    }
}

/// Reprojection residual `π(pose · P) − p`, or the fixed behind-camera penalty.
pub fn residual(k: &CameraIntrinsics, pose: &PoseSE3, c: &Correspondence) -> Vector2<f64> {
    match k.project_camera_point(&pose.transform_point(&c.world)) {
        Ok(uv) => uv - c.image,
        Err(_) => Vector2::new(BEHIND_CAMERA_RESIDUAL, BEHIND_CAMERA_RESIDUAL),
    }
}

pub fn reprojection_rms(k: &CameraIntrinsics, pose: &PoseSE3, corr: &[Correspondence]) -> f64 {
    if corr.is_empty() {
        return 0.0;
    }
    let ss: f64 = corr.iter().map(|c| residual(k, pose, c).norm_squared()).sum();
    (ss / corr.len() as f64).sqrt()
}

/// Similarity transform that centres points and scales their mean distance
/// from the centroid to `target`.
fn normalizing_scale(dists: impl Iterator<Item = f64>, n: usize, target: f64) -> f64 {
    let mean = dists.sum::<f64>() / n as f64;
    if mean > 0.0 {
        target / mean
    } else {
        1.0
    }
}

/// Raw 3×4 projection matrix in normalized camera coordinates, solved by DLT.
/// The result maps homogeneous base points to homogeneous normalized image
/// points up to scale.
pub fn dlt_matrix(corr: &[Correspondence], k: &CameraIntrinsics) -> Result<Matrix3x4<f64>> {
    let n = corr.len();
    if n < MIN_KEYPOINTS {
        return Err(Error::InsufficientPoints {
            required: MIN_KEYPOINTS,
            actual: n,
        });
    }
    let xs: Vec<Vector2<f64>> = corr.iter().map(|c| k.normalize(&c.image)).collect();
    let c2 = xs.iter().sum::<Vector2<f64>>() / n as f64;
    let s2 = normalizing_scale(xs.iter().map(|x| (x - c2).norm()), n, std::f64::consts::SQRT_2);
    let c3 = corr.iter().map(|c| c.world).sum::<Vector3<f64>>() / n as f64;
    let s3 = normalizing_scale(corr.iter().map(|c| (c.world - c3).norm()), n, 3f64.sqrt());

    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (c, x)) in corr.iter().zip(&xs).enumerate() {
        let u = (x - c2) * s2;
        let w = (c.world - c3) * s3;
        let xh = [w.x, w.y, w.z, 1.0];
        for j in 0..4 {
            a[(2 * i, j)] = xh[j];
            a[(2 * i, 8 + j)] = -u.x * xh[j];
            a[(2 * i + 1, 4 + j)] = xh[j];
            a[(2 * i + 1, 8 + j)] = -u.y * xh[j];
        }
    }
    // the null vector of A is the eigenvector of AᵀA with the smallest eigenvalue
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::NumericalFailure("DLT SVD did not converge".into()))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let largest = sv[order[0]];
    let second_smallest = sv[order[order.len() - 2]];
    if !(largest > 0.0) || second_smallest / largest < DLT_RANK_TOL {
        return Err(Error::DegenerateConfiguration(format!(
            "DLT design matrix rank deficient (σ ratio {:e})",
            second_smallest / largest.max(f64::MIN_POSITIVE)
        )));
    }
    let h = v_t.row(order[order.len() - 1]);
    let m_norm = Matrix3x4::from_fn(|r, c| h[4 * r + c]);

    let t2_inv = Matrix3::new(1.0 / s2, 0.0, c2.x, 0.0, 1.0 / s2, c2.y, 0.0, 0.0, 1.0);
    let t3 = Matrix4::new(
        s3, 0.0, 0.0, -s3 * c3.x, 0.0, s3, 0.0, -s3 * c3.y, 0.0, 0.0, s3, -s3 * c3.z, 0.0, 0.0, 0.0, 1.0,
    );
    Ok(t2_inv * m_norm * t3)
}

/// Reprojection RMS of a raw projection matrix (normalized camera coordinates).
pub fn matrix_reprojection_rms(m: &Matrix3x4<f64>, corr: &[Correspondence], k: &CameraIntrinsics) -> f64 {
    let ss: f64 = corr
        .iter()
        .map(|c| {
            let x = m * Vector4::new(c.world.x, c.world.y, c.world.z, 1.0);
            let uv = Vector2::new(k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy);
            (uv - c.image).norm_squared()
        })
        .sum();
    (ss / corr.len().max(1) as f64).sqrt()
}

/// Linear PnP: DLT, projection of the left 3×3 block onto SO(3), then a
/// least-squares translation refit for the fixed rotation.
pub fn pnp_dlt(corr: &[Correspondence], k: &CameraIntrinsics) -> Result<PoseSE3> {
    let mut m = dlt_matrix(corr, k)?;
    let left = m.fixed_view::<3, 3>(0, 0).into_owned();
    if left.determinant() < 0.0 {
        m = -m;
    }
    let left = m.fixed_view::<3, 3>(0, 0).into_owned();
    let scale = left.singular_values().mean();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::DegenerateConfiguration("DLT rotation block vanished".into()));
    }
    let rotation = nearest_rotation(&left);
    let t0 = m.column(3) / scale;
    let translation = refit_translation(corr, k, &rotation).unwrap_or(t0.into_owned());
    Ok(PoseSE3::new(rotation, translation))
}

/// Minimises the algebraic error `[x]× (R P + t)` over `t` for fixed `R`.
fn refit_translation(corr: &[Correspondence], k: &CameraIntrinsics, r: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for c in corr {
        let x = k.normalize(&c.image);
        let xh = Vector3::new(x.x, x.y, 1.0);
        let s = skew(&xh);
        let rp = r * c.world;
        // [x]× t = −[x]× R P
        ata += s.transpose() * s;
        atb -= s.transpose() * (s * rp);
    }
    ata.try_inverse().map(|inv| inv * atb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RansacResult {
    pub pose: PoseSE3,
    /// Correspondence ids consistent with the best hypothesis.
    pub inliers: Vec<usize>,
}

fn for_each_subset(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// RANSAC over minimal DLT solves. When the number of distinct minimal
/// subsets does not exceed `cfg.iterations`, every subset is tried in
/// lexicographic order instead of sampling.
pub fn pnp_ransac(corr: &[Correspondence], k: &CameraIntrinsics, cfg: &RansacConfig) -> Result<RansacResult> {
    cfg.validate()?;
    let n = corr.len();
    if n < cfg.sample_size {
        return Err(Error::InsufficientPoints {
            required: cfg.sample_size,
            actual: n,
        });
    }
    let mut best: Option<(usize, f64, PoseSE3, Vec<usize>)> = None;
    let mut sample = Vec::with_capacity(cfg.sample_size);
    let thr2 = cfg.inlier_threshold * cfg.inlier_threshold;
    let mut evaluate = |idx: &[usize]| {
        sample.clear();
        sample.extend(idx.iter().map(|&i| corr[i]));
        let Ok(pose) = pnp_dlt(&sample, k) else { return };
        let mut inliers = Vec::new();
        let mut ss = 0.0;
        for (i, c) in corr.iter().enumerate() {
            let e2 = residual(k, &pose, c).norm_squared();
            if e2 <= thr2 {
                inliers.push(i);
                ss += e2;
            }
        }
        let rms = if inliers.is_empty() {
            reprojection_rms(k, &pose, corr)
        } else {
            (ss / inliers.len() as f64).sqrt()
        };
        let better = match &best {
            None => true,
            Some((count, best_rms, _, _)) => {
                inliers.len() > *count || (inliers.len() == *count && rms < *best_rms)
            }
        };
        if better {
            best = Some((inliers.len(), rms, pose, inliers));
        }
    };
    if binomial(n, cfg.sample_size) <= cfg.iterations as u128 {
        for_each_subset(n, cfg.sample_size, &mut evaluate);
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..cfg.iterations {
            let mut idx = index::sample(&mut rng, n, cfg.sample_size).into_vec();
            idx.sort_unstable();
            evaluate(&idx);
        }
    }
    let (_, _, pose, inliers) = best.ok_or(Error::NoModelFound {
        iterations: cfg.iterations,
    })?;
    let pose = if inliers.len() > cfg.sample_size {
        let subset: Vec<Correspondence> = inliers.iter().map(|&i| corr[i]).collect();
        pnp_dlt(&subset, k).unwrap_or(pose)
    } else {
        pose
    };
    Ok(RansacResult {
        pose,
        inliers: inliers.iter().map(|&i| corr[i].id).collect(),
    })
}

/// The published weight `exp(−5‖r‖²)` for an already-normalized residual norm.
pub fn weight_of(normalized_residual: f64) -> f64 {
    (-WEIGHT_FACTOR * normalized_residual * normalized_residual)
        .exp()
        .max(f64::MIN_POSITIVE)
}

/// Per-keypoint weights from reprojection residuals (pixels). Residual norms
/// are divided by their median (floored at 1e-6) before `weight_of`.
pub fn reweight(residuals: &[Vector2<f64>]) -> Vec<f64> {
    if residuals.is_empty() {
        return Vec::new();
    }
    let norms: Vec<f64> = residuals.iter().map(|r| r.norm()).collect();
    let scale = median_of(&norms).max(MIN_WEIGHT_SCALE);
    norms.iter().map(|&r| weight_of(r / scale)).collect()
}

fn median_of(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineResult {
    pub pose: PoseSE3,
    /// RANSAC pose the refinement started from.
    pub initial_pose: PoseSE3,
    /// Correspondence ids, aligned with `weights` and `residuals`.
    pub ids: Vec<usize>,
    /// Weights used in the objective.
    pub weights: Vec<f64>,
    /// Final per-keypoint reprojection error norms, pixels.
    pub residuals: Vec<f64>,
    pub inliers: Vec<usize>,
    pub iterations_used: usize,
    pub final_cost: f64,
    /// Objective value at the start and after every accepted step.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub gradient_tol: f64,
    pub step_tol: f64,
    pub lambda_init: f64,
    pub lambda_factor: f64,
    pub lambda_max: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            max_iterations: 100,
            gradient_tol: 1e-10,
            step_tol: 1e-12,
            lambda_init: 1e-3,
            lambda_factor: 10.0,
            lambda_max: 1e8,
        }
    }
}

type Jac = SMatrix<f64, 2, 6>;

fn weighted_cost(k: &CameraIntrinsics, pose: &PoseSE3, corr: &[Correspondence], w: &[f64]) -> f64 {
    0.5 * corr
        .iter()
        .zip(w)
        .map(|(c, wi)| (residual(k, pose, c) * *wi).norm_squared())
        .sum::<f64>()
}

/// Weighted residual and its Jacobian w.r.t. `(δω, δt)` where the update is
/// `R ← exp(δω) R`, `T ← T + δt`.
/// `cost(pose ⊕ delta) − cost(pose)`. The per-point change of the projection
/// is formed directly from the increment, so the sign of the result stays
/// reliable close to the optimum where both costs agree to machine precision.
fn cost_delta(
    k: &CameraIntrinsics,
    pose: &PoseSE3,
    delta: &SVector<f64, 6>,
    corr: &[Correspondence],
    w: &[f64],
) -> f64 {
    let dr = so3_exp_minus_identity(&Vector3::new(delta[0], delta[1], delta[2])) * pose.rotation;
    let dt = Vector3::new(delta[3], delta[4], delta[5]);
    let candidate = apply_step(pose, delta);
    0.5 * corr
        .iter()
        .zip(w)
        .map(|(c, &wi)| {
            let x = pose.rotation * c.world + pose.translation;
            let dx = dr * c.world + dt;
            let z1 = x.z + dx.z;
            if x.z <= MIN_DEPTH || z1 <= MIN_DEPTH {
                let a = residual(k, &candidate, c) * wi;
                let b = residual(k, pose, c) * wi;
                return (a - b).dot(&(a + b));
            }
            let denom = x.z * z1;
            let d = Vector2::new(
                k.fx * (dx.x * x.z - x.x * dx.z) / denom,
                k.fy * (dx.y * x.z - x.y * dx.z) / denom,
            ) * wi;
            let b = residual(k, pose, c) * wi;
            2.0 * b.dot(&d) + d.norm_squared()
        })
        .sum::<f64>()
}

fn linearize(k: &CameraIntrinsics, pose: &PoseSE3, c: &Correspondence, w: f64) -> (Vector2<f64>, Jac) {
    let rp = pose.rotation * c.world;
    let x = rp + pose.translation;
    if x.z <= MIN_DEPTH {
        return (
            Vector2::new(BEHIND_CAMERA_RESIDUAL, BEHIND_CAMERA_RESIDUAL) * w,
            Jac::zeros(),
        );
    }
    let iz = 1.0 / x.z;
    let uv = Vector2::new(k.fx * x.x * iz + k.cx, k.fy * x.y * iz + k.cy);
    let jp = SMatrix::<f64, 2, 3>::new(
        k.fx * iz,
        0.0,
        -k.fx * x.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * x.y * iz * iz,
    );
    let mut j = Jac::zeros();
    j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * -skew(&rp) * w));
    j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jp * w));
    ((uv - c.image) * w, j)
}

fn apply_step(pose: &PoseSE3, delta: &SVector<f64, 6>) -> PoseSE3 {
    let dw = Vector3::new(delta[0], delta[1], delta[2]);
    let dt = Vector3::new(delta[3], delta[4], delta[5]);
    PoseSE3::new(so3_exp(&dw) * pose.rotation, pose.translation + dt)
}

/// Weighted LM refinement from `init`.
pub fn refine_lm(
    init: &PoseSE3,
    corr: &[Correspondence],
    k: &CameraIntrinsics,
    weights: &[f64],
) -> Result<RefineResult> {
    refine_lm_with(init, corr, k, weights, &LmConfig::default())
}

pub fn refine_lm_with(
    init: &PoseSE3,
    corr: &[Correspondence],
    k: &CameraIntrinsics,
    weights: &[f64],
    cfg: &LmConfig,
) -> Result<RefineResult> {
    if weights.len() != corr.len() {
        return Err(Error::LengthMismatch {
            expected: corr.len(),
            actual: weights.len(),
        });
    }
    let effective = weights.iter().filter(|&&w| w > MIN_LM_WEIGHT).count();
    if effective < MIN_LM_POINTS {
        return Err(Error::InsufficientPoints {
            required: MIN_LM_POINTS,
            actual: effective,
        });
    }
    let mut pose = *init;
    let mut cost = weighted_cost(k, &pose, corr, weights);
    let mut trace = vec![cost];
    let mut lambda = cfg.lambda_init;
    let mut iterations = 0;

    'outer: while iterations < cfg.max_iterations {
        let mut h = SMatrix::<f64, 6, 6>::zeros();
        let mut g = SVector::<f64, 6>::zeros();
        for (c, &w) in corr.iter().zip(weights) {
            let (r, j) = linearize(k, &pose, c, w);
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        if g.amax() < cfg.gradient_tol {
            break;
        }
        iterations += 1;
        loop {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                if lambda >= cfg.lambda_max {
                    return Err(Error::NumericalFailure(
                        "normal equations singular at maximum damping".into(),
                    ));
                }
                lambda *= cfg.lambda_factor;
                continue;
            };
            let delta = -chol.solve(&g);
            if delta.norm() < cfg.step_tol {
                break 'outer;
            }
            let candidate = apply_step(&pose, &delta);
            let change = cost_delta(k, &pose, &delta, corr, weights);
            if change < 0.0 {
                pose = candidate;
                cost = (cost + change).max(0.0);
                trace.push(cost);
                lambda = (lambda / cfg.lambda_factor).max(1e-12);
                break;
            }
            if lambda >= cfg.lambda_max {
                // no descent direction left at any damping
                break 'outer;
            }
            lambda *= cfg.lambda_factor;
        }
    }
    Ok(RefineResult {
        pose,
        initial_pose: *init,
        ids: corr.iter().map(|c| c.id).collect(),
        weights: weights.to_vec(),
        residuals: corr.iter().map(|c| residual(k, &pose, c).norm()).collect(),
        inliers: Vec::new(),
        iterations_used: iterations,
        final_cost: cost,
        trace,
    })
}

/// RANSAC initial pose, residual-based reweighting, weighted LM.
pub fn refine_correspondences(
    corr: &[Correspondence],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<RefineResult> {
    if corr.len() < MIN_KEYPOINTS {
        return Err(Error::InsufficientPoints {
            required: MIN_KEYPOINTS,
            actual: corr.len(),
        });
    }
    let init = pnp_ransac(corr, k, cfg)?;
    let residuals: Vec<Vector2<f64>> = corr.iter().map(|c| residual(k, &init.pose, c)).collect();
    let weights = reweight(&residuals);
    let mut result = refine_lm(&init.pose, corr, k, &weights)?;
    result.inliers = init.inliers;
    Ok(result)
}

/// Full single-frame solve from detections and their 3D keypoints.
pub fn refine_pose(
    detections: &KeypointSet2D,
    points: &KeypointSet3D,
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<RefineResult> {
    let corr = correspondences(detections, points)?;
    refine_correspondences(&corr, k, cfg)
}

/// Pools the correspondences of several frames observed by one static camera
/// into a single solve. Ids are renumbered `frame * c + keypoint`.
pub fn multiframe_pnp(
    frames: &[(KeypointSet2D, KeypointSet3D)],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<RefineResult> {
    let mut all = Vec::new();
    for (f, (det, pts)) in frames.iter().enumerate() {
        let stride = pts.len();
        for mut c in correspondences(det, pts)? {
            c.id += f * stride;
            all.push(c);
        }
    }
    refine_correspondences(&all, k, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn random_pose(rng: &mut ChaCha8Rng) -> PoseSE3 {
        let w = Vector3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        );
        // keep the scene centred in front of the camera
        let t = Vector3::new(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(2.0..4.0),
        );
        PoseSE3::from_axis_angle(w, t)
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                )
            })
            .collect()
    }

    fn exact_corr(k: &CameraIntrinsics, pose: &PoseSE3, pts: &[Vector3<f64>]) -> Vec<Correspondence> {
        pts.iter()
            .enumerate()
            .map(|(id, p)| Correspondence {
                image: crate::geometry::project(k, pose, p).unwrap(),
                world: *p,
                id,
            })
            .collect()
    }

    fn add_mm(a: &PoseSE3, b: &PoseSE3, pts: &[Vector3<f64>]) -> f64 {
        1e3 * pts
            .iter()
            .map(|p| (a.transform_point(p) - b.transform_point(p)).norm())
            .sum::<f64>()
            / pts.len() as f64
    }

    #[test]
    fn dlt_recovers_exact_pose() {
        let k = CameraIntrinsics::default_vga();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let pts = random_points(&mut rng, 7);
            let est = pnp_dlt(&exact_corr(&k, &pose, &pts), &k).unwrap();
            assert!(est.rotation_distance(&pose) < 1e-8);
            assert!(est.translation_distance(&pose) < 1e-8);
        }
    }

    #[test]
    fn dlt_canonical_pose() {
        let k = CameraIntrinsics::default_vga();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pose = PoseSE3::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let pts: Vec<_> = random_points(&mut rng, 6).iter().map(|p| p * 0.3).collect();
        let est = pnp_dlt(&exact_corr(&k, &pose, &pts), &k).unwrap();
        assert!(est.rotation_distance(&pose) < 1e-8);
        assert!(est.translation_distance(&pose) < 1e-8);
    }

    #[test]
    fn dlt_rejects_collinear_and_coplanar() {
        let k = CameraIntrinsics::default_vga();
        let pose = PoseSE3::from_translation(Vector3::new(0.0, 0.0, 3.0));
        let line: Vec<_> = (0..7).map(|i| Vector3::new(0.1 * i as f64, 0.05 * i as f64, 0.0)).collect();
        let err = pnp_dlt(&exact_corr(&k, &pose, &line), &k);
        assert!(matches!(err, Err(Error::DegenerateConfiguration(_))), "{err:?}");
        let plane: Vec<_> = (0..8)
            .map(|i| Vector3::new((i % 3) as f64 * 0.2, (i / 3) as f64 * 0.2 + 0.01 * i as f64, 0.0))
            .collect();
        let err = pnp_dlt(&exact_corr(&k, &pose, &plane), &k);
        assert!(matches!(err, Err(Error::DegenerateConfiguration(_))), "{err:?}");
        let err = pnp_dlt(&exact_corr(&k, &pose, &line[..5]), &k);
        assert!(matches!(err, Err(Error::InsufficientPoints { .. })));
    }

    #[test]
    fn dlt_pose_fit_vs_raw_matrix_without_noise() {
        let k = CameraIntrinsics::default_vga();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let corr = exact_corr(&k, &pose, &random_points(&mut rng, 8));
            let raw = matrix_reprojection_rms(&dlt_matrix(&corr, &k).unwrap(), &corr, &k);
            let fitted = reprojection_rms(&k, &pnp_dlt(&corr, &k).unwrap(), &corr);
            assert!(fitted <= raw + 1e-9, "{fitted} > {raw}");
        }
    }

    #[test]
    fn ransac_outlier_free_and_single_outlier() {
        let k = CameraIntrinsics::default_vga();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = RansacConfig::default();
        for trial in 0..100 {
            let pose = random_pose(&mut rng);
            let pts = random_points(&mut rng, 7);
            let mut corr = exact_corr(&k, &pose, &pts);
            let r = pnp_ransac(&corr, &k, &cfg).unwrap();
            assert_eq!(r.inliers.len(), 7);
            assert!(r.pose.translation_distance(&pose) < 1e-8);

            let bad = trial % 7;
            let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            corr[bad].image += Vector2::new(ang.cos(), ang.sin()) * 50.0;
            let r = pnp_ransac(&corr, &k, &cfg).unwrap();
            assert!(!r.inliers.contains(&bad));
            assert_eq!(r.inliers.len(), 6);
            assert!(r.pose.translation_distance(&pose) < 1e-6);
            assert!(r.pose.rotation_distance(&pose) < 1e-6);
        }
    }

    #[test]
    fn ransac_is_deterministic_when_sampling() {
        let k = CameraIntrinsics::default_vga();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pose = random_pose(&mut rng);
        let pts = random_points(&mut rng, 40);
        let noise = Normal::new(0.0, 2.0).unwrap();
        let mut corr = exact_corr(&k, &pose, &pts);
        for c in &mut corr {
            c.image += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
        }
        let cfg = RansacConfig {
            seed: 17,
            ..Default::default()
        };
        let a = pnp_ransac(&corr, &k, &cfg).unwrap();
        let b = pnp_ransac(&corr, &k, &cfg).unwrap();
        assert_eq!(a, b);
        let few = pnp_ransac(&corr[..5], &k, &cfg);
        assert!(matches!(few, Err(Error::InsufficientPoints { .. })));
    }

    #[test]
    fn ransac_all_degenerate_fails() {
        let k = CameraIntrinsics::default_vga();
        let pose = PoseSE3::from_translation(Vector3::new(0.0, 0.0, 3.0));
        let line: Vec<_> = (0..8).map(|i| Vector3::new(0.1 * i as f64, 0.0, 0.02 * i as f64)).collect();
        let r = pnp_ransac(&exact_corr(&k, &pose, &line), &k, &RansacConfig::default());
        assert!(matches!(r, Err(Error::NoModelFound { .. })));
    }

    #[test]
    fn weight_examples() {
        assert_eq!(weight_of(0.0), 1.0);
        assert!((weight_of(1.0) - 6.7379e-3).abs() < 1e-7);
        assert!(((-5.0f64).exp() - weight_of(1.0)).abs() < 1e-18);
        let res: Vec<_> = [0.0, 0.5, 1.0, 2.0, 3.0].iter().map(|&x| Vector2::new(x, 0.0)).collect();
        let w = reweight(&res);
        assert_eq!(w[0], 1.0);
        assert!((w[2] - weight_of(1.0)).abs() < 1e-15, "median residual normalizes to 1");
        assert!(w.windows(2).all(|p| p[1] < p[0]));
        assert!(w.iter().all(|&x| x > 0.0 && x <= 1.0));
        // zero residuals: the floor keeps weights at one
        assert!(reweight(&[Vector2::zeros(); 7]).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn lm_already_optimal() {
        let k = CameraIntrinsics::default_vga();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pose = random_pose(&mut rng);
        let corr = exact_corr(&k, &pose, &random_points(&mut rng, 7));
        let r = refine_lm(&pose, &corr, &k, &[1.0; 7]).unwrap();
        assert!(r.iterations_used <= 1);
        assert!(r.final_cost < 1e-16);
    }

    #[test]
    fn lm_converges_from_perturbed_start() {
        let k = CameraIntrinsics::default_vga();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let corr = exact_corr(&k, &pose, &random_points(&mut rng, 7));
            let axis = Vector3::new(rng.random(), rng.random(), rng.random::<f64>()).normalize();
            let dir = Vector3::new(rng.random(), rng.random(), rng.random::<f64>()).normalize();
            let init = PoseSE3::new(
                so3_exp(&(axis * 5f64.to_radians())) * pose.rotation,
                pose.translation + dir * 0.05,
            );
            let r = refine_lm(&init, &corr, &k, &[1.0; 7]).unwrap();
            assert!(r.pose.rotation_distance(&pose) < 1e-8);
            assert!(r.pose.translation_distance(&pose) < 1e-8);
            assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn lm_requires_four_weighted_points() {
        let k = CameraIntrinsics::default_vga();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pose = random_pose(&mut rng);
        let corr = exact_corr(&k, &pose, &random_points(&mut rng, 7));
        let w = [1.0, 1.0, 1.0, 1e-9, 1e-9, 1e-9, 1e-9];
        assert!(matches!(
            refine_lm(&pose, &corr, &k, &w),
            Err(Error::InsufficientPoints { required: 4, actual: 3 })
        ));
    }

    #[test]
    fn lm_invariant_to_ordering() {
        let k = CameraIntrinsics::default_vga();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 2.0).unwrap();
        for _ in 0..30 {
            let pose = random_pose(&mut rng);
            let mut corr = exact_corr(&k, &pose, &random_points(&mut rng, 9));
            for c in &mut corr {
                c.image += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
            let w: Vec<f64> = (0..9).map(|_| rng.random_range(0.1..1.0)).collect();
            let a = refine_lm(&pose, &corr, &k, &w).unwrap();
            let mut perm: Vec<usize> = (0..9).collect();
            perm.reverse();
            perm.swap(0, 4);
            let pc: Vec<_> = perm.iter().map(|&i| corr[i]).collect();
            let pw: Vec<_> = perm.iter().map(|&i| w[i]).collect();
            let b = refine_lm(&pose, &pc, &k, &pw).unwrap();
            assert!(a.pose.rotation_distance(&b.pose) < 1e-10);
            assert!(a.pose.translation_distance(&b.pose) < 1e-10);
        }
    }

    #[test]
    fn behind_camera_points_keep_cost_finite() {
        let k = CameraIntrinsics::default_vga();
        let pose = PoseSE3::from_translation(Vector3::new(0.0, 0.0, 3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut corr = exact_corr(&k, &pose, &random_points(&mut rng, 7));
        corr[0].world = Vector3::new(0.0, 0.0, -10.0);
        let r = refine_lm(&pose, &corr, &k, &[1.0; 7]).unwrap();
        assert!(r.final_cost.is_finite());
        assert!((r.final_cost - 1e6).abs() < 1e-3);
    }

    #[test]
    fn refine_pose_zero_noise_and_insufficient_points() {
        let k = CameraIntrinsics::default_vga();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pose = random_pose(&mut rng);
        let pts = random_points(&mut rng, 7);
        let corr = exact_corr(&k, &pose, &pts);
        let mut det = KeypointSet2D::new(corr.iter().map(|c| c.image).collect());
        let p3 = KeypointSet3D::new(pts);
        let r = refine_pose(&det, &p3, &k, &RansacConfig::default()).unwrap();
        assert!(r.pose.translation_distance(&r.initial_pose) < 1e-9);
        assert!(r.pose.rotation_distance(&r.initial_pose) < 1e-9);
        assert!(r.weights.iter().all(|&w| w > 0.999));
        det.in_frame[0] = false;
        det.in_frame[3] = false;
        assert!(matches!(
            refine_pose(&det, &p3, &k, &RansacConfig::default()),
            Err(Error::InsufficientPoints { required: 6, actual: 5 })
        ));
    }

    #[test]
    fn multiframe_single_frame_matches_refine_pose() {
        let k = CameraIntrinsics::default_vga();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let noise = Normal::new(0.0, 2.0).unwrap();
        let pose = random_pose(&mut rng);
        let pts = random_points(&mut rng, 7);
        let mut det = KeypointSet2D::new(exact_corr(&k, &pose, &pts).iter().map(|c| c.image).collect());
        for p in &mut det.points {
            *p += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
        }
        let p3 = KeypointSet3D::new(pts);
        let cfg = RansacConfig::default();
        let single = refine_pose(&det, &p3, &k, &cfg).unwrap();
        let multi = multiframe_pnp(&[(det, p3)], &k, &cfg).unwrap();
        assert_eq!(single, multi);
    }

    #[test]
    fn multiframe_zero_noise_twenty_frames() {
        let k = CameraIntrinsics::default_vga();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let pose = random_pose(&mut rng);
        let frames: Vec<_> = (0..20)
            .map(|_| {
                let pts = random_points(&mut rng, 7);
                let det = KeypointSet2D::new(exact_corr(&k, &pose, &pts).iter().map(|c| c.image).collect());
                (det, KeypointSet3D::new(pts))
            })
            .collect();
        let r = multiframe_pnp(&frames, &k, &RansacConfig::default()).unwrap();
        assert!(r.pose.translation_distance(&pose) < 1e-8);
        assert!(r.pose.rotation_distance(&pose) < 1e-8);
    }

    #[test]
    fn weighted_refinement_beats_uniform_with_one_outlier() {
        // no Gaussian noise: only the 20 px outlier perturbs the fit
        let k = CameraIntrinsics::default_vga();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let cfg = RansacConfig::default();
        let trials = 1000;
        let mut wins = 0;
        for _ in 0..trials {
            let pose = random_pose(&mut rng);
            let pts = random_points(&mut rng, 7);
            let mut corr = exact_corr(&k, &pose, &pts);
            let bad = rng.random_range(0..7);
            let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            corr[bad].image += Vector2::new(ang.cos(), ang.sin()) * 20.0;
            let weighted = refine_correspondences(&corr, &k, &cfg).unwrap();
            let uniform = refine_lm(&weighted.initial_pose, &corr, &k, &[1.0; 7]).unwrap();
            if add_mm(&weighted.pose, &pose, &pts) <= add_mm(&uniform.pose, &pose, &pts) {
                wins += 1;
            }
        }
        assert!(wins as f64 >= 0.9 * trials as f64, "{wins}/{trials}");
    }

    #[test]
    fn subset_enumeration_counts() {
        let mut count = 0;
        for_each_subset(7, 6, |s| {
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            count += 1;
        });
        assert_eq!(count, 7);
        let mut count = 0;
        for_each_subset(10, 6, |_| count += 1);
        assert_eq!(count as u128, binomial(10, 6));
        assert_eq!(binomial(20, 10), 184_756);
    }
}
