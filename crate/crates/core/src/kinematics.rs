//! Forward kinematics for serial revolute chains.
//!
//! Each link applies its fixed transform and then rotates about its joint
//! axis by the joint angle. Keypoints are anchored to links by a local offset.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axis_rotation, PoseSE3};

/// Minimum number of keypoints needed for a direct PnP solve.
pub const MIN_KEYPOINTS: usize = 6;

const DEFAULT_CHAIN_JSON: &str = include_str!("../data/default_chain.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub transform: PoseSE3,
    pub axis: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub link: usize,
    pub offset: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicChain {
    pub links: Vec<Link>,
    pub anchors: Vec<Anchor>,
    /// Resting configuration the simulator oscillates around.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub angles: Vec<f64>,
}

impl JointConfig {
    pub fn new(angles: Vec<f64>) -> Self {
        JointConfig { angles }
    }

    pub fn zeros(n: usize) -> Self {
        JointConfig {
            angles: vec![0.0; n],
        }
    }
}

/// Keypoint positions in the robot base frame; `ids` are dense `0..c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet3D {
    pub points: Vec<Vector3<f64>>,
    pub ids: Vec<usize>,
}

impl KeypointSet3D {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        let ids = (0..points.len()).collect();
        KeypointSet3D { points, ids }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl KinematicChain {
    /// The bundled placeholder arm: 7 revolute joints, 7 keypoints.
    pub fn default_arm() -> Self {
        serde_json::from_str(DEFAULT_CHAIN_JSON).expect("bundled chain parses")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let chain: KinematicChain = serde_json::from_str(s)?;
        let violations = validate_chain(&chain);
        if !violations.is_empty() {
            return Err(Error::InvalidConfig(violations.join("; ")));
        }
        Ok(chain)
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    pub fn num_keypoints(&self) -> usize {
        self.anchors.len()
    }

    pub fn nominal_config(&self) -> JointConfig {
        match &self.nominal {
            Some(q) if q.len() == self.links.len() => JointConfig::new(q.clone()),
            _ => JointConfig::zeros(self.links.len()),
        }
    }

    /// Upper bound on the distance of any keypoint from the base origin,
    /// valid for every joint configuration.
    pub fn reach(&self) -> f64 {
        // joint rotations preserve lengths, so the triangle inequality over
        // the fixed offsets bounds every anchor
        let mut prefix = Vec::with_capacity(self.links.len());
        let mut acc = 0.0;
        for link in &self.links {
            acc += link.transform.translation.norm();
            prefix.push(acc);
        }
        self.anchors
            .iter()
            .map(|a| prefix.get(a.link).copied().unwrap_or(acc) + a.offset.norm())
            .fold(0.0, f64::max)
    }

    /// Random chain with `links` joints and `anchors` keypoints, reach about 1 m.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, links: usize, anchors: usize) -> Self {
        let links: Vec<Link> = (0..links)
            .map(|_| {
                let w = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let t = Vector3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(0.05..0.2),
                );
                let axis = loop {
                    let a = Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    );
                    if a.norm() > 0.2 {
                        break a.normalize();
                    }
                };
                Link {
                    transform: PoseSE3::from_axis_angle(w, t),
                    axis,
                }
            })
            .collect();
        let n = links.len();
        let anchors = (0..anchors)
            .map(|i| Anchor {
                link: (i * n / anchors.max(1)).min(n - 1),
                offset: Vector3::new(
                    rng.random_range(-0.08..0.08),
                    rng.random_range(-0.08..0.08),
                    rng.random_range(-0.08..0.08),
                ),
            })
            .collect();
        KinematicChain {
            links,
            anchors,
            nominal: None,
        }
    }
}

/// Lists every violated chain invariant; empty means valid.
pub fn validate_chain(chain: &KinematicChain) -> Vec<String> {
    let mut out = Vec::new();
    for link in &chain.links {
        if (link.axis.norm() - 1.0).abs() > 1e-9 {
            out.push("joint_axis not unit".to_string());
        }
        if !link.transform.is_valid(1e-9) {
            out.push("link transform not rigid".to_string());
        }
    }
    if chain.anchors.iter().any(|a| a.link >= chain.links.len()) {
        out.push("anchor out of range".to_string());
    }
    if chain.anchors.len() < MIN_KEYPOINTS {
        out.push(format!("fewer than {MIN_KEYPOINTS} keypoint anchors"));
    }
    if let Some(q) = &chain.nominal {
        if q.len() != chain.links.len() {
            out.push("nominal config length mismatch".to_string());
        }
    }
    out.dedup();
    out
}

/// World pose of every link frame (after its joint rotation).
pub fn link_poses(chain: &KinematicChain, q: &JointConfig) -> Result<Vec<PoseSE3>> {
    if q.angles.len() != chain.links.len() {
        return Err(Error::LengthMismatch {
            expected: chain.links.len(),
            actual: q.angles.len(),
        });
    }
    let mut acc = PoseSE3::identity();
    Ok(chain
        .links
        .iter()
        .zip(&q.angles)
        .map(|(link, &angle)| {
            let joint = PoseSE3::new(axis_rotation(&link.axis, angle), Vector3::zeros());
            acc = acc.compose(&link.transform).compose(&joint);
            acc
        })
        .collect())
}

pub fn fk_keypoints(chain: &KinematicChain, q: &JointConfig) -> Result<KeypointSet3D> {
    let frames = link_poses(chain, q)?;
    let points = chain
        .anchors
        .iter()
        .map(|a| {
            frames
                .get(a.link)
                .map(|f| f.transform_point(&a.offset))
                .ok_or_else(|| Error::InvalidConfig("anchor out of range".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KeypointSet3D::new(points))
}
