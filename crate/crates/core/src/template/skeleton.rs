use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// One capsule bone. The capsule axis runs from the bone head to
/// `head + tail`; the joint rotation pivots about the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bone {
    pub name: String,
    pub parent: Option<usize>,
    /// Head position relative to the parent's head (absolute for the root).
    pub offset: [f64; 3],
    pub tail: [f64; 3],
    pub radius: f64,
    /// Per-axis bound on the joint's axis-angle components, in radians.
    pub limit: [f64; 3],
}

/// Kinematic tree of capsule bones in topological order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub bones: Vec<Bone>,
}

impl SkeletonSpec {
    pub fn new(bones: Vec<Bone>) -> Result<Self> {
        let spec = Self { bones };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bones.is_empty() {
            return Err(Error::invalid("skeleton has no bones"));
        }
        let roots = self.bones.iter().filter(|b| b.parent.is_none()).count();
        if roots != 1 {
            return Err(Error::invalid(format!("skeleton needs exactly one root, found {roots}")));
        }
        if self.bones[0].parent.is_some() {
            return Err(Error::invalid("the root must be the first bone"));
        }
        for (i, b) in self.bones.iter().enumerate() {
            if let Some(p) = b.parent {
                if p >= i {
                    return Err(Error::invalid(format!(
                        "bone {i} ({}) has parent {p}; parents must precede children",
                        b.name
                    )));
                }
            }
            if !(b.radius > 0.0 && b.radius.is_finite()) {
                return Err(Error::invalid(format!("bone {i} ({}) has radius {}", b.name, b.radius)));
            }
            let finite = b.offset.iter().chain(&b.tail).all(|v| v.is_finite());
            if !finite || b.limit.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
                return Err(Error::invalid(format!("bone {i} ({}) has non-finite geometry or limits", b.name)));
            }
            if Vec3::from(b.tail).norm() == 0.0 {
                return Err(Error::invalid(format!("bone {i} ({}) has a zero-length tail", b.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.bones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bones.is_empty()
    }

    /// Rest-pose head positions in model coordinates.
    pub fn rest_heads(&self) -> Vec<Vec3> {
        let mut heads: Vec<Vec3> = Vec::with_capacity(self.bones.len());
        for b in &self.bones {
            let base = b.parent.map_or(Vec3::zeros(), |p| heads[p]);
            heads.push(base + Vec3::from(b.offset));
        }
        heads
    }

    /// A 12-bone humanoid in a T-pose, y up, sized so the rest surface has a
    /// bounding-box diagonal close to 1.
    pub fn humanoid() -> Self {
        let spine = [0.4; 3];
        let limb = [1.2; 3];
        let bone =
            |name: &str, parent: Option<usize>, offset: [f64; 3], tail: [f64; 3], radius: f64, limit: [f64; 3]| Bone {
                name: name.to_string(),
                parent,
                offset,
                tail,
                radius,
                limit,
            };
        let mut bones = vec![
            bone("pelvis", None, [0.0, 0.0, 0.0], [0.0, 0.07, 0.0], 0.055, spine),
            bone("spine_lower", Some(0), [0.0, 0.07, 0.0], [0.0, 0.08, 0.0], 0.055, spine),
            bone("spine_upper", Some(1), [0.0, 0.08, 0.0], [0.0, 0.1, 0.0], 0.06, spine),
            bone("head", Some(2), [0.0, 0.125, 0.0], [0.0, 0.08, 0.0], 0.045, limb),
        ];
        for (side, sx) in [("l", 1.0), ("r", -1.0)] {
            let shoulder = bones.len();
            bones.push(bone(
                &format!("{side}_upper_arm"),
                Some(2),
                [sx * 0.085, 0.085, 0.0],
                [sx * 0.14, 0.0, 0.0],
                0.025,
                limb,
            ));
            bones.push(bone(
                &format!("{side}_forearm"),
                Some(shoulder),
                [sx * 0.14, 0.0, 0.0],
                [sx * 0.13, 0.0, 0.0],
                0.02,
                limb,
            ));
        }
        for (side, sx) in [("l", 1.0), ("r", -1.0)] {
            let hip = bones.len();
            bones.push(bone(
                &format!("{side}_thigh"),
                Some(0),
                [sx * 0.05, -0.01, 0.0],
                [0.0, -0.21, 0.0],
                0.037,
                limb,
            ));
            bones.push(bone(&format!("{side}_shin"), Some(hip), [0.0, -0.21, 0.0], [0.0, -0.21, 0.0], 0.028, limb));
        }
        Self { bones }
    }

    /// A single capsule bone along +x starting at the origin.
    pub fn single_bone(length: f64, radius: f64) -> Self {
        Self {
            bones: vec![Bone {
                name: "bone".to_string(),
                parent: None,
                offset: [0.0; 3],
                tail: [length, 0.0, 0.0],
                radius,
                limit: [std::f64::consts::PI; 3],
            }],
        }
    }
}

impl Default for SkeletonSpec {
    fn default() -> Self {
        Self::humanoid()
    }
}
