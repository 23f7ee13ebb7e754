use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{chamfer_refine, displacement_refine, fit_template_params, RefineConfig};
use crate::error::{Error, Result};
use crate::field::{infer_vertices, InferenceMode, NeuralDeformationField, LVD_ITERATIONS};
use crate::geometry::{normalize_cloud, write_xyz, Normalization, PointCloud, Vec3};
use crate::nicp::{nicp_refine, NicpConfig, NicpTrace};
use crate::template::{derive_seed, pose_template, PoseShapeParams, TemplateModel};

/// Which pipeline stages run, and the inference settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub nicp: bool,
    pub inference: InferenceMode,
    pub iterations: usize,
    pub fit: bool,
    pub chamfer: bool,
    pub displacements: bool,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            nicp: true,
            inference: InferenceMode::Lvd,
            iterations: LVD_ITERATIONS,
            fit: true,
            chamfer: true,
            displacements: false,
            seed: 0,
        }
    }
}

/// Everything [`register`] needs besides the field and the target.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegisterConfig {
    pub stages: StageConfig,
    pub nicp: NicpConfig,
    pub refine: RefineConfig,
}

impl RegisterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.iterations == 0 {
            return Err(Error::invalid("stages.iterations must be at least 1"));
        }
        if self.stages.nicp {
            self.nicp.validate()?;
        }
        if (self.stages.chamfer || self.stages.displacements) && !self.stages.fit {
            return Err(Error::invalid("chamfer and displacement stages need the fit stage"));
        }
        self.refine.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Skipped,
}

/// Per-stage status and loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDiagnostics {
    pub name: String,
    pub status: StageStatus,
    pub trace: Vec<f64>,
}

/// Output of the registration pipeline, in the units of the raw target.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub params: Option<PoseShapeParams>,
    pub vertices: Vec<Vec3>,
    /// Converged field trackers before any template fitting.
    pub field_vertices: Vec<Vec3>,
    pub displacements: Option<Vec<Vec3>>,
    pub normalization: Normalization,
    pub stages: Vec<StageDiagnostics>,
    pub nicp_trace: Option<NicpTrace>,
    /// Wall-clock seconds per stage; never written to disk.
    pub timings: Vec<(String, f64)>,
}

impl RegistrationResult {
    pub fn stage(&self, name: &str) -> Option<&StageDiagnostics> {
        self.stages.iter().find(|s| s.name == name)
    }
}

struct Recorder {
    stages: Vec<StageDiagnostics>,
    timings: Vec<(String, f64)>,
}

impl Recorder {
    fn run<T>(&mut self, name: &str, enabled: bool, f: impl FnOnce() -> Result<(T, Vec<f64>)>) -> Result<Option<T>> {
        if !enabled {
            self.stages.push(StageDiagnostics { name: name.into(), status: StageStatus::Skipped, trace: Vec::new() });
            return Ok(None);
        }
        let start = Instant::now();
        let (out, trace) = f()?;
        self.timings.push((name.into(), start.elapsed().as_secs_f64()));
        self.stages.push(StageDiagnostics { name: name.into(), status: StageStatus::Ran, trace });
        Ok(Some(out))
    }
}

/// Normalizes the target, refines a copy of the field on it, follows the
/// field to convergence, then fits and refines the template in the target's
/// own units.
pub fn register(
    field: &NeuralDeformationField,
    template: &TemplateModel,
    target: &PointCloud,
    config: &RegisterConfig,
) -> Result<RegistrationResult> {
    config.validate()?;
    if target.len() < 100 {
        return Err(Error::invalid(format!("target has {} points, need at least 100", target.len())));
    }
    if !field.template_hash.is_empty() && field.template_hash != template.content_hash() {
        return Err(Error::invalid("field was trained on a different template"));
    }
    let stages = &config.stages;
    let mut rec = Recorder { stages: Vec::new(), timings: Vec::new() };
    let (normalized, normalization) =
        rec.run("normalize", true, || Ok((normalize_cloud(target)?, Vec::new())))?.expect("enabled");
    let mut field = field.clone();
    field.bind_target(&normalized)?;
    let nicp_cfg = NicpConfig { seed: derive_seed(stages.seed, 0), ..config.nicp.clone() };
    let nicp_trace = rec.run("nicp", stages.nicp, || {
        let trace = nicp_refine(&mut field, &nicp_cfg)?;
        let means = trace.steps.iter().map(|l| l.mean).collect();
        Ok((trace, means))
    })?;
    let field_vertices = rec
        .run("inference", true, || {
            let v = infer_vertices(&field, stages.inference, stages.iterations, derive_seed(stages.seed, 1))?;
            Ok((normalization.inverse_all(&v), Vec::new()))
        })?
        .expect("enabled");
    let raw = target.points();
    let mut params = rec.run("fit", stages.fit, || fit_template_params(template, &field_vertices, &config.refine))?;
    if let Some(p) = &params {
        if let Some(refined) =
            rec.run("chamfer", stages.chamfer, || chamfer_refine(template, p, raw, &config.refine))?
        {
            params = Some(refined);
        }
    } else {
        rec.run::<()>("chamfer", false, || unreachable!())?;
    }
    let displacements = match &params {
        Some(p) => {
            rec.run("displacements", stages.displacements, || displacement_refine(template, p, raw, &config.refine))?
        }
        None => rec.run("displacements", false, || unreachable!())?,
    };
    let vertices = match &params {
        Some(p) => {
            let base = pose_template(template, p)?;
            match &displacements {
                Some(o) => base.iter().zip(o).map(|(v, d)| v + d).collect(),
                None => base,
            }
        }
        None => field_vertices.clone(),
    };
    Ok(RegistrationResult {
        params,
        vertices,
        field_vertices,
        displacements,
        normalization,
        stages: rec.stages,
        nicp_trace,
        timings: rec.timings,
    })
}

#[derive(Serialize, Deserialize)]
struct Diagnostics {
    normalization: Normalization,
    stages: Vec<StageDiagnostics>,
    nicp_trace: Option<NicpTrace>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

/// Writes vertices.xyz, field_vertices.xyz, params.json (when fitted),
/// displacements.xyz (when computed) and diagnostics.json.
pub fn write_result(dir: &Path, result: &RegistrationResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_xyz(dir.join("vertices.xyz"), &result.vertices)?;
    write_xyz(dir.join("field_vertices.xyz"), &result.field_vertices)?;
    if let Some(p) = &result.params {
        write_text(&dir.join("params.json"), &(serde_json::to_string_pretty(p).expect("plain data") + "\n"))?;
    }
    if let Some(o) = &result.displacements {
        write_xyz(dir.join("displacements.xyz"), o)?;
    }
    let diagnostics = Diagnostics {
        normalization: result.normalization,
        stages: result.stages.clone(),
        nicp_trace: result.nicp_trace.clone(),
    };
    write_text(&dir.join("diagnostics.json"), &(serde_json::to_string_pretty(&diagnostics).expect("plain data") + "\n"))
}

/// Reads a directory written by [`write_result`]; timings are not restored.
pub fn read_result(dir: &Path) -> Result<RegistrationResult> {
    let vertices = PointCloud::read_xyz(dir.join("vertices.xyz"))?.into_points();
    let field_vertices = PointCloud::read_xyz(dir.join("field_vertices.xyz"))?.into_points();
    let params_path = dir.join("params.json");
    let params = if params_path.exists() { Some(read_json(&params_path)?) } else { None };
    let disp_path = dir.join("displacements.xyz");
    let displacements = if disp_path.exists() { Some(PointCloud::read_xyz(&disp_path)?.into_points()) } else { None };
    let d: Diagnostics = read_json(&dir.join("diagnostics.json"))?;
    Ok(RegistrationResult {
        params,
        vertices,
        field_vertices,
        displacements,
        normalization: d.normalization,
        stages: d.stages,
        nicp_trace: d.nicp_trace,
        timings: Vec::new(),
    })
}
