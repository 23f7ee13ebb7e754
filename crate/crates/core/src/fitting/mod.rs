//! Parametric template fitting, Chamfer refinement and Laplacian-regularized
//! per-vertex displacements.

mod pipeline;

pub use pipeline::{
    read_result, register, write_result, RegisterConfig, RegistrationResult, StageConfig, StageDiagnostics, StageStatus,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centroid, ChamferMode, NearestIndex, Vec3};
use crate::nn::{adam_step, cosine_lr, AdamState, ParamStore, Tape, Tensor, Var};
use crate::template::{pose_template_tape, ParamLayout, PoseShapeParams, TemplateModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub fit_steps: usize,
    pub fit_lr: f64,
    pub chamfer_steps: usize,
    pub chamfer_lr: f64,
    /// `a_to_b` measures only target → template, for partial targets.
    pub chamfer_mode: ChamferMode,
    pub pose_weight: f64,
    pub scale_weight: f64,
    pub displacement_steps: usize,
    pub displacement_lr: f64,
    pub offset_weight: f64,
    pub laplacian_weight: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            fit_steps: 2000,
            fit_lr: 1e-1,
            chamfer_steps: 500,
            chamfer_lr: 2e-2,
            chamfer_mode: ChamferMode::Bidirectional,
            pose_weight: 1e-8,
            scale_weight: 1e-2,
            displacement_steps: 500,
            displacement_lr: 1e-3,
            offset_weight: 1e-2,
            laplacian_weight: 1.0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, steps) in [
            ("fit_steps", self.fit_steps),
            ("chamfer_steps", self.chamfer_steps),
            ("displacement_steps", self.displacement_steps),
        ] {
            if steps == 0 {
                return Err(Error::invalid(format!("refine.{key} must be at least 1")));
            }
        }
        self.check_weights()
    }

    fn check_weights(&self) -> Result<()> {
        for (key, w) in [
            ("fit_lr", self.fit_lr),
            ("chamfer_lr", self.chamfer_lr),
            ("displacement_lr", self.displacement_lr),
            ("pose_weight", self.pose_weight),
            ("scale_weight", self.scale_weight),
            ("offset_weight", self.offset_weight),
            ("laplacian_weight", self.laplacian_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("refine.{key} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

fn points_tensor(points: &[Vec3]) -> Tensor {
    Tensor::from_vec(points.len(), 3, points.iter().flat_map(|p| [p.x, p.y, p.z]).collect())
}

fn tensor_points(t: &Tensor) -> Vec<Vec3> {
    t.data.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

/// Pose-magnitude and scale-deviation penalties on the flat parameter row.
fn penalties(tape: &mut Tape, params: Var, bones: usize, config: &RefineConfig) -> Var {
    let layout = ParamLayout { bones };
    let joints: Vec<(usize, usize)> = (0..3 * bones).map(|i| (0, layout.joint(0) + i)).collect();
    let theta = tape.gather_elems(params, &joints);
    let pose = tape.sq_norm(theta);
    let pose = tape.scale(pose, config.pose_weight);
    let scales: Vec<(usize, usize)> =
        (0..bones).flat_map(|b| [(0, layout.length_scale(b)), (0, layout.radius_scale(b))]).collect();
    let s = tape.gather_elems(params, &scales);
    let ones = tape.constant(Tensor::filled(2 * bones, 1, 1.0));
    let dev = tape.sub(s, ones);
    let dev = tape.sq_norm(dev);
    let dev = tape.scale(dev, config.scale_weight);
    tape.add(pose, dev)
}

/// Chamfer terms between posed points `x` (m×3, on the tape) and a fixed
/// target, with nearest neighbours chosen at the current values.
fn chamfer_on_tape(
    tape: &mut Tape,
    x: Var,
    target: &[Vec3],
    target_index: &NearestIndex,
    mode: ChamferMode,
) -> Result<Var> {
    let current = tensor_points(tape.value(x));
    let template_index = NearestIndex::build(&current)?;
    let nearest_vertex = template_index.nearest_indices(target);
    let picked = tape.gather_rows(x, &nearest_vertex);
    let t = tape.constant(points_tensor(target));
    let d = tape.sub(picked, t);
    let sq = tape.sq_norm(d);
    let to_template = tape.scale(sq, 1.0 / target.len() as f64);
    Ok(match mode {
        ChamferMode::AToB => to_template,
        ChamferMode::Bidirectional => {
            let nearest_target: Vec<Vec3> =
                target_index.nearest_indices(&current).into_iter().map(|i| target[i]).collect();
            let g = tape.constant(points_tensor(&nearest_target));
            let d = tape.sub(x, g);
            let sq = tape.sq_norm(d);
            let to_target = tape.scale(sq, 1.0 / current.len() as f64);
            tape.add(to_template, to_target)
        }
    })
}

fn flat_store(flat: Vec<f64>) -> ParamStore {
    let mut store = ParamStore::new();
    store.insert("params", Tensor::row(&flat)).expect("finite parameters");
    store
}

/// Adam over the flat parameter row with a projection onto the limits after
/// every step. Root joint rotations duplicate the global rotation and stay
/// fixed. Returns the final parameters and the pre-step losses.
fn optimize_params(
    template: &TemplateModel,
    init: &PoseShapeParams,
    steps: usize,
    lr: f64,
    mut loss: impl FnMut(&mut Tape, Var) -> Result<Var>,
) -> Result<(PoseShapeParams, Vec<f64>)> {
    let bones = template.bone_count();
    let layout = ParamLayout { bones };
    let frozen: Vec<usize> = template
        .skeleton
        .bones
        .iter()
        .enumerate()
        .filter(|(_, b)| b.parent.is_none())
        .flat_map(|(i, _)| layout.joint(i)..layout.joint(i) + 3)
        .collect();
    let mut store = flat_store(init.to_flat());
    let mut adam = AdamState::new(&store);
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut tape = Tape::new();
        let p = tape.var(store.get("params").expect("inserted").clone());
        let l = loss(&mut tape, p)?;
        trace.push(tape.value(l).item());
        let mut g = tape.backward(l).wrt(p);
        for &i in &frozen {
            g.data[i] = 0.0;
        }
        let mut grads = ParamStore::new();
        grads.insert("params", g)?;
        adam_step(&mut adam, &mut store, &grads, cosine_lr(lr, step, steps))?;
        let flat = store.get_mut("params").expect("inserted");
        let mut params = PoseShapeParams::from_flat(bones, &flat.data)?;
        params.clamp_to(&template.skeleton);
        flat.data = params.to_flat();
    }
    let params = PoseShapeParams::from_flat(bones, &store.get("params").expect("inserted").data)?;
    Ok((params, trace))
}

/// Mean per-vertex L1 distance between the posed template and `predicted`,
/// plus the pose and scale penalties.
pub fn fit_loss(
    tape: &mut Tape,
    template: &TemplateModel,
    predicted: &[Vec3],
    params: Var,
    config: &RefineConfig,
) -> Var {
    let posed = pose_template_tape(tape, template, params);
    let pred = tape.constant(points_tensor(predicted));
    let d = tape.sub(posed, pred);
    let a = tape.abs(d);
    let s = tape.sum(a);
    let l1 = tape.scale(s, 1.0 / predicted.len() as f64);
    let pen = penalties(tape, params, template.bone_count(), config);
    tape.add(l1, pen)
}

/// Rest parameters translated so the rest centroid meets the centroid of `points`.
pub fn initial_params(template: &TemplateModel, points: &[Vec3]) -> PoseShapeParams {
    let mut p = PoseShapeParams::rest(template.bone_count());
    p.translation = (centroid(points) - centroid(&template.rest_vertices)).into();
    p
}

/// Fits pose and shape parameters to predicted vertex positions.
pub fn fit_template_params(
    template: &TemplateModel,
    predicted: &[Vec3],
    config: &RefineConfig,
) -> Result<(PoseShapeParams, Vec<f64>)> {
    config.check_weights()?;
    if predicted.len() != template.vertex_count() {
        return Err(Error::invalid(format!(
            "{} predicted vertices for a {}-vertex template",
            predicted.len(),
            template.vertex_count()
        )));
    }
    if predicted.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::invalid("predicted vertices must be finite"));
    }
    let init = initial_params(template, predicted);
    optimize_params(template, &init, config.fit_steps, config.fit_lr, |tape, p| {
        Ok(fit_loss(tape, template, predicted, p, config))
    })
}

/// Chamfer objective of the posed template against `target`, plus penalties.
pub fn chamfer_loss(
    tape: &mut Tape,
    template: &TemplateModel,
    target: &[Vec3],
    target_index: &NearestIndex,
    params: Var,
    config: &RefineConfig,
) -> Result<Var> {
    let posed = pose_template_tape(tape, template, params);
    let c = chamfer_on_tape(tape, posed, target, target_index, config.chamfer_mode)?;
    let pen = penalties(tape, params, template.bone_count(), config);
    Ok(tape.add(c, pen))
}

/// Refines parameters against the target geometry; nearest neighbours are
/// refreshed every step.
pub fn chamfer_refine(
    template: &TemplateModel,
    params: &PoseShapeParams,
    target: &[Vec3],
    config: &RefineConfig,
) -> Result<(PoseShapeParams, Vec<f64>)> {
    config.check_weights()?;
    params.validate(&template.skeleton)?;
    let index = NearestIndex::build(target)?;
    optimize_params(template, params, config.chamfer_steps, config.chamfer_lr, |tape, p| {
        chamfer_loss(tape, template, target, &index, p, config)
    })
}

/// `(1/m) Σ ‖(L O)_i‖²`, the change in the discrete Laplacian caused by the
/// displacements.
pub fn laplacian_smoothness(laplacian: &DMatrix<f64>, displacements: &[Vec3]) -> Result<f64> {
    let m = displacements.len();
    if laplacian.nrows() != m || laplacian.ncols() != m || m == 0 {
        return Err(Error::invalid(format!(
            "{}×{} Laplacian for {m} displacements",
            laplacian.nrows(),
            laplacian.ncols()
        )));
    }
    let o = DMatrix::from_fn(m, 3, |i, a| displacements[i][a]);
    Ok((laplacian * o).norm_squared() / m as f64)
}

fn laplacian_tensor(laplacian: &DMatrix<f64>) -> Tensor {
    let m = laplacian.nrows();
    Tensor::from_vec(m, m, (0..m * m).map(|k| laplacian[(k / m, k % m)]).collect())
}

/// Chamfer of the displaced vertices plus offset and Laplacian penalties.
pub fn displacement_loss(
    tape: &mut Tape,
    base: &[Vec3],
    laplacian: &Tensor,
    target: &[Vec3],
    target_index: &NearestIndex,
    offsets: Var,
    config: &RefineConfig,
) -> Result<Var> {
    let m = base.len() as f64;
    let v = tape.constant(points_tensor(base));
    let x = tape.add(v, offsets);
    let c = chamfer_on_tape(tape, x, target, target_index, config.chamfer_mode)?;
    let off = tape.sq_norm(offsets);
    let off = tape.scale(off, config.offset_weight / m);
    let l = tape.constant(laplacian.clone());
    let lo = tape.matmul(l, offsets);
    let lap = tape.sq_norm(lo);
    let lap = tape.scale(lap, config.laplacian_weight / m);
    let reg = tape.add(off, lap);
    Ok(tape.add(c, reg))
}

/// Per-vertex displacements on top of the posed template, with the
/// parameters frozen. Starts from zero.
pub fn displacement_refine(
    template: &TemplateModel,
    params: &PoseShapeParams,
    target: &[Vec3],
    config: &RefineConfig,
) -> Result<(Vec<Vec3>, Vec<f64>)> {
    config.check_weights()?;
    let base = crate::template::pose_template(template, params)?;
    let laplacian = laplacian_tensor(&crate::geometry::graph_laplacian(&template.graph));
    let index = NearestIndex::build(target)?;
    let mut store = ParamStore::new();
    store.insert("offsets", Tensor::zeros(base.len(), 3))?;
    let mut adam = AdamState::new(&store);
    let mut trace = Vec::with_capacity(config.displacement_steps);
    for _ in 0..config.displacement_steps {
        let mut tape = Tape::new();
        let o = tape.var(store.get("offsets").expect("inserted").clone());
        let l = displacement_loss(&mut tape, &base, &laplacian, target, &index, o, config)?;
        trace.push(tape.value(l).item());
        let mut grads = ParamStore::new();
        grads.insert("offsets", tape.backward(l).wrt(o))?;
        adam_step(&mut adam, &mut store, &grads, config.displacement_lr)?;
    }
    Ok((tensor_points(store.get("offsets").expect("inserted")), trace))
}
