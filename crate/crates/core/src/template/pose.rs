use nalgebra::{Matrix3, Rotation3};
use serde::{Deserialize, Serialize};

use super::model::{Capsule, TemplateModel};
use super::skeleton::SkeletonSpec;
use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};
use crate::nn::{rodrigues_matrix, Tape, Tensor, Var};

pub const MIN_SCALE: f64 = 0.5;
pub const MAX_SCALE: f64 = 2.0;

/// Articulation and shape of a posed template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseShapeParams {
    /// Axis-angle rotation per bone, about the bone head.
    pub joint_rotations: Vec<[f64; 3]>,
    pub global_rotation: [f64; 3],
    pub translation: [f64; 3],
    /// Scale along each bone's axis.
    pub length_scales: Vec<f64>,
    /// Scale across each bone's axis.
    pub radius_scales: Vec<f64>,
}

/// Positions of each parameter group inside the flat vector
/// `[global rotation, translation, joint rotations, length scales, radius scales]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub bones: usize,
}

impl ParamLayout {
    pub const GLOBAL_ROTATION: usize = 0;
    pub const TRANSLATION: usize = 3;
    pub const JOINTS: usize = 6;

    pub fn len(&self) -> usize {
        6 + 5 * self.bones
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn joint(&self, bone: usize) -> usize {
        Self::JOINTS + 3 * bone
    }

    pub fn length_scale(&self, bone: usize) -> usize {
        Self::JOINTS + 3 * self.bones + bone
    }

    pub fn radius_scale(&self, bone: usize) -> usize {
        Self::JOINTS + 4 * self.bones + bone
    }
}

impl PoseShapeParams {
    /// Zero rotations, unit scales, no translation.
    pub fn rest(bones: usize) -> Self {
        Self {
            joint_rotations: vec![[0.0; 3]; bones],
            global_rotation: [0.0; 3],
            translation: [0.0; 3],
            length_scales: vec![1.0; bones],
            radius_scales: vec![1.0; bones],
        }
    }

    pub fn bones(&self) -> usize {
        self.joint_rotations.len()
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout { bones: self.bones() }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout().len());
        out.extend_from_slice(&self.global_rotation);
        out.extend_from_slice(&self.translation);
        for r in &self.joint_rotations {
            out.extend_from_slice(r);
        }
        out.extend_from_slice(&self.length_scales);
        out.extend_from_slice(&self.radius_scales);
        out
    }

    pub fn from_flat(bones: usize, flat: &[f64]) -> Result<Self> {
        let layout = ParamLayout { bones };
        if flat.len() != layout.len() {
            return Err(Error::invalid(format!(
                "flat parameter vector has length {}, expected {}",
                flat.len(),
                layout.len()
            )));
        }
        let three = |i: usize| [flat[i], flat[i + 1], flat[i + 2]];
        Ok(Self {
            global_rotation: three(ParamLayout::GLOBAL_ROTATION),
            translation: three(ParamLayout::TRANSLATION),
            joint_rotations: (0..bones).map(|b| three(layout.joint(b))).collect(),
            length_scales: flat[layout.length_scale(0)..layout.length_scale(0) + bones].to_vec(),
            radius_scales: flat[layout.radius_scale(0)..layout.radius_scale(0) + bones].to_vec(),
        })
    }

    /// Checks bone count, rotation limits, and the scale range.
    pub fn validate(&self, skeleton: &SkeletonSpec) -> Result<()> {
        let j = skeleton.len();
        if self.joint_rotations.len() != j || self.length_scales.len() != j || self.radius_scales.len() != j {
            return Err(Error::invalid(format!("parameters do not match a {j}-bone skeleton")));
        }
        if self.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters contain non-finite values"));
        }
        for (b, (r, bone)) in self.joint_rotations.iter().zip(&skeleton.bones).enumerate() {
            for a in 0..3 {
                if r[a].abs() > bone.limit[a] + 1e-12 {
                    return Err(Error::invalid(format!(
                        "joint {b} ({}) axis {a} rotation {} exceeds limit {}",
                        bone.name, r[a], bone.limit[a]
                    )));
                }
            }
        }
        let scales = self.length_scales.iter().chain(&self.radius_scales);
        if let Some(s) = scales.into_iter().find(|s| !(MIN_SCALE..=MAX_SCALE).contains(*s)) {
            return Err(Error::invalid(format!("scale {s} outside [{MIN_SCALE}, {MAX_SCALE}]")));
        }
        Ok(())
    }

    /// Projects rotations onto the joint limits and scales onto their range.
    pub fn clamp_to(&mut self, skeleton: &SkeletonSpec) {
        for (r, bone) in self.joint_rotations.iter_mut().zip(&skeleton.bones) {
            for a in 0..3 {
                r[a] = r[a].clamp(-bone.limit[a], bone.limit[a]);
            }
        }
        for s in self.length_scales.iter_mut().chain(self.radius_scales.iter_mut()) {
            *s = s.clamp(MIN_SCALE, MAX_SCALE);
        }
    }

    pub fn global_transform(&self) -> RigidTransform {
        RigidTransform::from_axis_angle(Vec3::from(self.global_rotation), Vec3::from(self.translation))
    }

    /// Parameters whose posed output equals `transform` applied to this pose.
    pub fn with_rigid_transform(&self, transform: &RigidTransform) -> Self {
        let composed = transform.compose(&self.global_transform());
        let axis = Rotation3::from_matrix_unchecked(composed.rotation).scaled_axis();
        Self { global_rotation: axis.into(), translation: composed.translation.into(), ..self.clone() }
    }

    /// Squared norm of all joint rotations.
    pub fn pose_magnitude(&self) -> f64 {
        self.joint_rotations.iter().flatten().map(|v| v * v).sum()
    }
}

/// `ls·aaᵀ + rs·(I − aaᵀ)` for the bone axis direction `a`.
fn shape_matrix(tail: &Vec3, ls: f64, rs: f64) -> Matrix3<f64> {
    let (p, q) = axis_projectors(tail);
    p * ls + q * rs
}

fn axis_projectors(tail: &Vec3) -> (Matrix3<f64>, Matrix3<f64>) {
    let a = tail.normalize();
    let p = a * a.transpose();
    (p, Matrix3::identity() - p)
}

/// Posed frame of one bone before the global transform: a rest point `x`
/// skinned to this bone maps to `head + linear · (x − rest_head)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoneFrame {
    pub linear: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub head: Vec3,
    pub rest_head: Vec3,
}

/// Forward kinematics over the skeleton.
pub fn bone_frames(skeleton: &SkeletonSpec, params: &PoseShapeParams) -> Vec<BoneFrame> {
    let rest = skeleton.rest_heads();
    let mut frames: Vec<BoneFrame> = Vec::with_capacity(skeleton.len());
    for (b, bone) in skeleton.bones.iter().enumerate() {
        let local = Matrix3::from_fn(|i, j| rodrigues_matrix(params.joint_rotations[b])[i][j]);
        let a = shape_matrix(&Vec3::from(bone.tail), params.length_scales[b], params.radius_scales[b]);
        let (rotation, head) = match bone.parent {
            None => (local, rest[b]),
            Some(p) => {
                let parent = &frames[p];
                (parent.rotation * local, parent.head + parent.linear * (rest[b] - rest[p]))
            }
        };
        frames.push(BoneFrame { linear: rotation * a, rotation, head, rest_head: rest[b] });
    }
    frames
}

/// Poses the template: forward kinematics, linear blend skinning, then the
/// global rotation and translation.
pub fn pose_template(template: &TemplateModel, params: &PoseShapeParams) -> Result<Vec<Vec3>> {
    params.validate(&template.skeleton)?;
    Ok(pose_unchecked(template, params))
}

pub(crate) fn pose_unchecked(template: &TemplateModel, params: &PoseShapeParams) -> Vec<Vec3> {
    let frames = bone_frames(&template.skeleton, params);
    let global = params.global_transform();
    let j = template.skeleton.len();
    template
        .rest_vertices
        .iter()
        .enumerate()
        .map(|(v, x)| {
            let mut y = Vec3::zeros();
            for (b, f) in frames.iter().enumerate() {
                let w = template.weights[v * j + b];
                if w != 0.0 {
                    y += (f.head + f.linear * (x - f.rest_head)) * w;
                }
            }
            global.apply(&y)
        })
        .collect()
}

/// Capsules of the posed skeleton, in the posed frame.
pub fn posed_capsules(skeleton: &SkeletonSpec, params: &PoseShapeParams) -> Vec<Capsule> {
    let frames = bone_frames(skeleton, params);
    let global = params.global_transform();
    skeleton
        .bones
        .iter()
        .zip(&frames)
        .enumerate()
        .map(|(b, (bone, f))| Capsule {
            a: global.apply(&f.head),
            b: global.apply(&(f.head + f.linear * Vec3::from(bone.tail))),
            radius: bone.radius * params.radius_scales[b],
        })
        .collect()
}

fn gather3(tape: &mut Tape, params: Var, start: usize) -> Var {
    let col = tape.gather_elems(params, &[(0, start), (0, start + 1), (0, start + 2)]);
    tape.transpose(col)
}

/// Records the posed vertices (m×3) on `tape` as a function of the flat
/// parameter row `params` (1×P, see [`ParamLayout`]).
pub fn pose_template_tape(tape: &mut Tape, template: &TemplateModel, params: Var) -> Var {
    let skeleton = &template.skeleton;
    let layout = ParamLayout { bones: skeleton.len() };
    let rest = skeleton.rest_heads();
    let m = template.rest_vertices.len();
    let j = skeleton.len();
    let mut rotations: Vec<Var> = Vec::with_capacity(j);
    let mut linears_t: Vec<Var> = Vec::with_capacity(j);
    let mut heads: Vec<Var> = Vec::with_capacity(j);
    let mut blended: Option<Var> = None;
    for (b, bone) in skeleton.bones.iter().enumerate() {
        let theta = gather3(tape, params, layout.joint(b));
        let local = tape.rodrigues(theta);
        let ls = tape.gather_elems(params, &[(0, layout.length_scale(b))]);
        let rs = tape.gather_elems(params, &[(0, layout.radius_scale(b))]);
        let (p, q) = axis_projectors(&Vec3::from(bone.tail));
        let p = tape.constant(matrix3_tensor(&p));
        let q = tape.constant(matrix3_tensor(&q));
        let p = tape.scale_by(p, ls);
        let q = tape.scale_by(q, rs);
        let a = tape.add(p, q);
        let (rotation, head) = match bone.parent {
            None => (local, tape.constant(vec3_row(&rest[b]))),
            Some(parent) => {
                let rot = tape.matmul(rotations[parent], local);
                let rel = tape.constant(vec3_row(&(rest[b] - rest[parent])));
                let moved = tape.matmul(rel, linears_t[parent]);
                (rot, tape.add(heads[parent], moved))
            }
        };
        let linear = tape.matmul(rotation, a);
        let linear_t = tape.transpose(linear);
        rotations.push(rotation);
        linears_t.push(linear_t);
        heads.push(head);

        let column: Vec<f64> = (0..m).map(|v| template.weights[v * j + b]).collect();
        if column.iter().all(|w| *w == 0.0) {
            continue;
        }
        let mut rel = Tensor::zeros(m, 3);
        for (v, x) in template.rest_vertices.iter().enumerate() {
            let d = x - rest[b];
            rel.row_slice_mut(v).copy_from_slice(d.as_slice());
        }
        let rel = tape.constant(rel);
        let moved = tape.matmul(rel, linear_t);
        let placed = tape.add_row(moved, head);
        let weights = tape.constant(Tensor::column(&column));
        let weighted = tape.mul_col(placed, weights);
        blended = Some(match blended {
            None => weighted,
            Some(acc) => tape.add(acc, weighted),
        });
    }
    let blended = blended.expect("skinning weights cover at least one bone");
    let global = gather3(tape, params, ParamLayout::GLOBAL_ROTATION);
    let global = tape.rodrigues(global);
    let global_t = tape.transpose(global);
    let rotated = tape.matmul(blended, global_t);
    let translation = gather3(tape, params, ParamLayout::TRANSLATION);
    tape.add_row(rotated, translation)
}

fn matrix3_tensor(m: &Matrix3<f64>) -> Tensor {
    Tensor::from_vec(3, 3, (0..9).map(|k| m[(k / 3, k % 3)]).collect())
}

fn vec3_row(v: &Vec3) -> Tensor {
    Tensor::row(v.as_slice())
}
