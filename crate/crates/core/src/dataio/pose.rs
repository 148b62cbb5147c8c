//! Joint annotations and the annotation JSON schema
//! `{"k": 19, "joints": [{"name": "Head", "x": .., "y": .., "z": ..}, ...]}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

pub const NUM_JOINTS: usize = 19;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "Head",
    "Neck",
    "UpperSpine",
    "MiddleSpine",
    "DownSpine",
    "RightShoulder",
    "RightElbow",
    "RightWrist",
    "RightHand",
    "LeftShoulder",
    "LeftElbow",
    "LeftWrist",
    "LeftHand",
    "RightHip",
    "RightKnee",
    "RightFoot",
    "LeftHip",
    "LeftKnee",
    "LeftFoot",
];

pub const UPPER_SPINE: usize = 2;
pub const DOWN_SPINE: usize = 4;

/// Name of joint `i` in a `k`-joint skeleton. Skeletons other than the
/// standard 19-joint one get positional names.
pub fn joint_name(i: usize, k: usize) -> String {
    if k == NUM_JOINTS {
        JOINT_NAMES[i].to_string()
    } else {
        format!("J{i}")
    }
}

/// Left/right label permutation applied by a horizontal flip.
pub fn mirror_permutation(k: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..k).collect();
    if k == NUM_JOINTS {
        for (r, l) in [(5, 9), (6, 10), (7, 11), (8, 12), (13, 16), (14, 17), (15, 18)] {
            perm[r] = l;
            perm[l] = r;
        }
    }
    perm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    /// Column, image pixels.
    pub x: f64,
    /// Row, image pixels.
    pub y: f64,
    /// Millimetres.
    pub z: f64,
}

impl Joint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Joint { x, y, z }
    }

    pub fn dist2d(&self, other: &Joint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// One joint position per body part, indexed by part id.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseConfig {
    pub joints: Vec<Joint>,
}

impl PoseConfig {
    pub fn new(joints: Vec<Joint>) -> Self {
        PoseConfig { joints }
    }

    pub fn k(&self) -> usize {
        self.joints.len()
    }

    pub fn in_bounds(&self, width: u32, height: u32) -> bool {
        self.joints.iter().all(|j| {
            j.x >= 0.0 && j.y >= 0.0 && j.x <= (width - 1) as f64 && j.y <= (height - 1) as f64
        })
    }

    /// Mirrors x about the image centre and swaps left/right labels.
    pub fn flipped(&self, width: u32) -> PoseConfig {
        let perm = mirror_permutation(self.k());
        let mut joints = self.joints.clone();
        for (i, j) in self.joints.iter().enumerate() {
            joints[perm[i]] = Joint::new((width - 1) as f64 - j.x, j.y, j.z);
        }
        PoseConfig { joints }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> PoseConfig {
        PoseConfig {
            joints: self
                .joints
                .iter()
                .map(|j| Joint::new(j.x + dx, j.y + dy, j.z))
                .collect(),
        }
    }

    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        for (i, j) in self.joints.iter().enumerate() {
            if !(j.x.is_finite() && j.y.is_finite() && j.z.is_finite()) || j.z < 0.0 {
                return Err(Error::contract(format!("joint {i} has invalid coordinates")));
            }
        }
        if !self.in_bounds(width, height) {
            return Err(Error::contract(format!(
                "pose has joints outside the {width}x{height} image"
            )));
        }
        Ok(())
    }

    pub fn to_annotation(&self) -> Annotation {
        let k = self.k();
        Annotation {
            k,
            joints: self
                .joints
                .iter()
                .enumerate()
                .map(|(i, j)| NamedJoint {
                    name: joint_name(i, k),
                    x: j.x,
                    y: j.y,
                    z: j.z,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedJoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub k: usize,
    pub joints: Vec<NamedJoint>,
}

impl Annotation {
    pub fn to_pose(&self) -> Result<PoseConfig, FormatError> {
        if self.joints.len() != self.k {
            return Err(FormatError::invalid(
                "joints",
                format!("declared k = {} but {} joints listed", self.k, self.joints.len()),
            ));
        }
        for (i, j) in self.joints.iter().enumerate() {
            let want = joint_name(i, self.k);
            if j.name != want {
                return Err(FormatError::invalid(
                    "joints",
                    format!("joint {i} is named {:?}, expected {want:?}", j.name),
                ));
            }
            if !(j.x.is_finite() && j.y.is_finite() && j.z.is_finite()) {
                return Err(FormatError::invalid("joints", format!("joint {i} is not finite")));
            }
        }
        Ok(PoseConfig::new(
            self.joints.iter().map(|j| Joint::new(j.x, j.y, j.z)).collect(),
        ))
    }
}

pub fn pose_to_json(pose: &PoseConfig) -> String {
    serde_json::to_string_pretty(&pose.to_annotation()).expect("annotation serialises")
}

pub fn pose_from_json(bytes: &[u8]) -> Result<PoseConfig, FormatError> {
    let ann: Annotation = serde_json::from_slice(bytes)?;
    ann.to_pose()
}
