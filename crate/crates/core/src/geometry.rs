//! Rigid transforms, pinhole projection and the raw-image to network-input
//! affine mapping.
//!
//! A [`PoseSE3`] maps robot-base coordinates into the camera frame, so a base
//! point `P` lands in the image at `project(K, pose, P)`.

use nalgebra::{Matrix2, Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera-frame depth at or below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

const AFFINE_DET_EPS: f64 = 1e-12;

/// Rigid transform `x -> rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRepr", into = "PoseRepr")]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<PoseRepr> for PoseSE3 {
    fn from(r: PoseRepr) -> Self {
        let rotation = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        PoseSE3 {
            rotation,
            translation: Vector3::from(r.translation),
        }
    }
}

impl From<PoseSE3> for PoseRepr {
    fn from(p: PoseSE3) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = p.rotation[(i, j)];
            }
        }
        PoseRepr {
            rotation,
            translation: p.translation.into(),
        }
    }
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        PoseSE3 {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        PoseSE3 {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        PoseSE3::new(Matrix3::identity(), t)
    }

    /// Rotation by `|axis_angle|` radians about `axis_angle`, followed by `t`.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, t: Vector3<f64>) -> Self {
        PoseSE3::new(so3_exp(&axis_angle), t)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Checks orthonormality and a positive determinant within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let rtr = self.rotation.transpose() * self.rotation;
        (rtr - Matrix3::identity()).amax() <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// Geodesic angle between the two rotations, in radians.
    pub fn rotation_distance(&self, other: &PoseSE3) -> f64 {
        rotation_angle(&(self.rotation.transpose() * other.rotation))
    }

    pub fn translation_distance(&self, other: &PoseSE3) -> f64 {
        (self.translation - other.translation).norm()
    }
}

/// Rodrigues' formula.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::identity() + so3_exp_minus_identity(w)
}

/// `exp([w]×) − I`, accurate for tiny `w` where forming the full rotation
/// would round the increment away.
pub fn so3_exp_minus_identity(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    if theta < 1e-8 {
        // second-order Taylor expansion
        return k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let half = 0.5 * theta;
    // 1 − cos θ = 2 sin²(θ/2), without cancellation
    let b = 2.0 * (half.sin() / theta).powi(2);
    a * k + b * k * k
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Angle of a rotation matrix, robust near 0 and π.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let axis = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin = 0.5 * axis.norm();
    sin.atan2(cos)
}

/// Nearest rotation matrix in Frobenius norm.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        r = u * d * v_t;
    }
    r
}

/// Rotation about a fixed axis, convenience wrapper used by kinematics and tests.
pub fn axis_rotation(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(axis.normalize() * angle).into_inner()
}

/// Pinhole intrinsics (no distortion).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "intrinsics need fx, fy > 0 and non-empty image (fx={fx}, fy={fy}, {width}x{height})"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// 640×480 camera with a 600 px focal length.
    pub fn default_vga() -> Self {
        CameraIntrinsics {
            fx: 600.0,
            fy: 600.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }

    /// Projects a point already expressed in the camera frame.
    pub fn project_camera_point(&self, x: &Vector3<f64>) -> Result<Vector2<f64>> {
        if x.z <= MIN_DEPTH {
            return Err(Error::NonPositiveDepth { depth: x.z });
        }
        Ok(Vector2::new(
            self.fx * x.x / x.z + self.cx,
            self.fy * x.y / x.z + self.cy,
        ))
    }

    /// Back-projects a pixel to the normalized image plane (z = 1).
    pub fn normalize(&self, p: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy)
    }

    /// Whether a pixel lies inside `[0, width) × [0, height)`.
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }
}

/// `π(K, pose · P)`.
pub fn project(k: &CameraIntrinsics, pose: &PoseSE3, p: &Vector3<f64>) -> Result<Vector2<f64>> {
    k.project_camera_point(&pose.transform_point(p))
}

/// `p -> linear * p + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap2D {
    pub linear: Matrix2<f64>,
    pub offset: Vector2<f64>,
}

impl AffineMap2D {
    pub fn identity() -> Self {
        AffineMap2D {
            linear: Matrix2::identity(),
            offset: Vector2::zeros(),
        }
    }

    pub fn new(linear: Matrix2<f64>, offset: Vector2<f64>) -> Result<Self> {
        let det = linear.determinant();
        if det.abs() <= AFFINE_DET_EPS || !det.is_finite() {
            return Err(Error::SingularAffine { det });
        }
        Ok(AffineMap2D { linear, offset })
    }

    /// Aspect-preserving scale of a `width × height` image into a centred
    /// `size × size` square, padding the short side.
    pub fn letterbox(width: u32, height: u32, size: u32) -> Self {
        let s = (size as f64 / width as f64).min(size as f64 / height as f64);
        let pad_x = 0.5 * (size as f64 - s * width as f64);
        let pad_y = 0.5 * (size as f64 - s * height as f64);
        AffineMap2D {
            linear: Matrix2::from_diagonal(&Vector2::new(s, s)),
            offset: Vector2::new(pad_x, pad_y),
        }
    }

    pub fn apply(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.linear * p + self.offset
    }

    pub fn invert(&self) -> Result<AffineMap2D> {
        let det = self.linear.determinant();
        if det.abs() <= AFFINE_DET_EPS || !det.is_finite() {
            return Err(Error::SingularAffine { det });
        }
        let inv = self
            .linear
            .try_inverse()
            .ok_or(Error::SingularAffine { det })?;
        Ok(AffineMap2D {
            linear: inv,
            offset: -(inv * self.offset),
        })
    }
}

pub fn affine_apply(m: &AffineMap2D, p: &Vector2<f64>) -> Vector2<f64> {
    m.apply(p)
}

pub fn affine_invert(m: &AffineMap2D) -> Result<AffineMap2D> {
    m.invert()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn rz(angle: f64) -> PoseSE3 {
        PoseSE3::from_axis_angle(Vector3::new(0.0, 0.0, angle), Vector3::zeros())
    }

    fn arb_pose() -> impl Strategy<Value = PoseSE3> {
        (
            prop::array::uniform3(-3.0f64..3.0),
            prop::array::uniform3(-2.0f64..2.0),
        )
            .prop_map(|(w, t)| PoseSE3::from_axis_angle(Vector3::from(w), Vector3::from(t)))
    }

    #[test]
    fn compose_identity_and_inverse_pair() {
        let id = PoseSE3::identity();
        assert_eq!(id.compose(&id), id);
        let c = rz(FRAC_PI_2).compose(&rz(-FRAC_PI_2));
        assert!((c.rotation - Matrix3::identity()).amax() < 1e-12);
        assert!(c.translation.norm() < 1e-12);
    }

    #[test]
    fn inverse_of_pure_translation() {
        let p = PoseSE3::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let inv = p.inverse();
        assert_eq!(inv.translation, Vector3::new(-1.0, -2.0, -3.0));
        assert_eq!(PoseSE3::identity().inverse(), PoseSE3::identity());
    }

    #[test]
    fn project_examples() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 10, 10).unwrap();
        let p = project(&k, &PoseSE3::identity(), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p, Vector2::new(0.0, 0.0));

        let k = CameraIntrinsics::default_vga();
        let p = project(&k, &PoseSE3::identity(), &Vector3::new(0.1, 0.0, 1.0)).unwrap();
        assert!((p - Vector2::new(380.0, 240.0)).norm() < 1e-12);

        let err = project(&k, &PoseSE3::identity(), &Vector3::new(0.1, 0.0, -1.0));
        assert!(matches!(err, Err(Error::NonPositiveDepth { .. })));
        let err = project(&k, &PoseSE3::identity(), &Vector3::new(0.1, 0.0, 1e-7));
        assert!(matches!(err, Err(Error::NonPositiveDepth { .. })));
    }

    #[test]
    fn affine_examples() {
        let id = AffineMap2D::identity();
        assert_eq!(id.apply(&Vector2::new(10.0, 20.0)), Vector2::new(10.0, 20.0));

        let lb = AffineMap2D::letterbox(640, 480, 480);
        let origin = lb.apply(&Vector2::zeros());
        assert_eq!(origin, Vector2::new(0.0, 60.0));
        let corner = lb.apply(&Vector2::new(640.0, 480.0));
        assert_eq!(corner, Vector2::new(480.0, 420.0));
        let inv = lb.invert().unwrap();
        let p = Vector2::new(123.25, 77.5);
        assert!((inv.apply(&lb.apply(&p)) - p).norm() < 1e-9);

        let singular = AffineMap2D::new(Matrix2::zeros(), Vector2::zeros());
        assert!(matches!(singular, Err(Error::SingularAffine { .. })));
        let m = AffineMap2D {
            linear: Matrix2::zeros(),
            offset: Vector2::zeros(),
        };
        assert!(matches!(m.invert(), Err(Error::SingularAffine { .. })));
    }

    #[test]
    fn pose_json_layout() {
        let p = PoseSE3::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let v: serde_json::Value = serde_json::to_value(p).unwrap();
        assert_eq!(v["rotation"][0], serde_json::json!([1.0, 0.0, 0.0]));
        assert_eq!(v["translation"], serde_json::json!([1.0, 2.0, 3.0]));
        let back: PoseSE3 = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
        let k = serde_json::to_value(CameraIntrinsics::default_vga()).unwrap();
        assert_eq!(k["fx"], 600.0);
        assert_eq!(k["height"], 480);
    }

    #[test]
    fn rotation_angle_near_pi() {
        let r = so3_exp(&Vector3::new(0.0, std::f64::consts::PI - 1e-9, 0.0));
        assert!((rotation_angle(&r) - (std::f64::consts::PI - 1e-9)).abs() < 1e-7);
    }

    proptest! {
        #[test]
        fn compose_matches_sequential_application(a in arb_pose(), b in arb_pose(),
                                                   x in prop::array::uniform3(-5.0f64..5.0)) {
            let x = Vector3::from(x);
            let direct = a.compose(&b).transform_point(&x);
            let seq = a.transform_point(&b.transform_point(&x));
            prop_assert!((direct - seq).amax() < 1e-12);
        }

        #[test]
        fn compose_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!((l.rotation - r.rotation).amax() < 1e-10);
            prop_assert!((l.translation - r.translation).amax() < 1e-10);
        }

        #[test]
        fn inverse_round_trip(a in arb_pose(), x in prop::array::uniform3(-5.0f64..5.0)) {
            let x = Vector3::from(x);
            let back = a.inverse().transform_point(&a.transform_point(&x));
            prop_assert!((back - x).amax() < 1e-12);
            let id = a.compose(&a.inverse());
            prop_assert!((id.rotation - Matrix3::identity()).amax() < 1e-12);
            prop_assert!(id.translation.amax() < 1e-12);
            prop_assert!(a.is_valid(1e-9));
        }

        #[test]
        fn projection_is_ray_scale_invariant(a in arb_pose(),
                                             x in prop::array::uniform3(-1.0f64..1.0),
                                             s in 0.1f64..10.0) {
            let k = CameraIntrinsics::default_vga();
            let mut xc = Vector3::from(x);
            xc.z = xc.z.abs() + 0.5;
            // pick the base point whose camera-frame image is xc, then its scaled twin
            let inv = a.inverse();
            let p = inv.transform_point(&xc);
            let p_scaled = inv.transform_point(&(xc * s));
            let u = project(&k, &a, &p).unwrap();
            let v = project(&k, &a, &p_scaled).unwrap();
            prop_assert!((u - v).amax() < 1e-8);
        }
    }

    #[test]
    fn affine_round_trip_random_maps() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 1000 {
            let l = Matrix2::from_fn(|_, _| rng.random_range(-3.0..3.0));
            let o = Vector2::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
            let Ok(m) = AffineMap2D::new(l, o) else { continue };
            if m.linear.determinant().abs() < 1e-3 {
                continue;
            }
            let p = Vector2::new(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0));
            let back = m.invert().unwrap().apply(&m.apply(&p));
            assert!((back - p).amax() < 1e-9, "{back} vs {p}");
            checked += 1;
        }
    }
}
