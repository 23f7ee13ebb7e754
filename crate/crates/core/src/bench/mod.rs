//! Registration metrics and the benchmark harness.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{InferenceMode, NeuralDeformationField, LVD_ITERATIONS};
use crate::fitting::{register, RegisterConfig, StageConfig};
use crate::geometry::{all_pairs_geodesics, centroid, KnnGraph, NearestIndex, PointCloud, Vec3};
use crate::nicp::rigid_icp;
use crate::template::{GroundTruthPair, TemplateModel};

/// Per-vertex Euclidean distances and their mean.
pub fn v2v_error(pred: &[Vec3], gt: &[Vec3]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid(format!("{} predicted vs {} ground-truth vertices", pred.len(), gt.len())));
    }
    let d: Vec<f64> = pred.iter().zip(gt).map(|(a, b)| (a - b).norm()).collect();
    Ok((d.iter().sum::<f64>() / d.len() as f64, d))
}

/// Fraction of shapes where `with` is strictly below `without`.
pub fn improvement_rate(without: &[f64], with: &[f64]) -> Result<f64> {
    if without.len() != with.len() || without.is_empty() {
        return Err(Error::invalid(format!("{} vs {} per-shape errors", without.len(), with.len())));
    }
    let wins = without.iter().zip(with).filter(|(a, b)| b < a).count();
    Ok(wins as f64 / without.len() as f64)
}

/// Cumulative fraction of errors at or below each threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
    /// Trapezoid area under the curve.
    pub auc: f64,
}

impl ErrorCurve {
    pub fn from_errors(errors: &[f64], thresholds: &[f64]) -> Result<Self> {
        if thresholds.is_empty() || thresholds.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("thresholds must be non-empty and ascending"));
        }
        if errors.is_empty() {
            return Err(Error::invalid("error curve needs at least one error"));
        }
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let fractions: Vec<f64> = thresholds.iter().map(|t| sorted.partition_point(|e| e <= t) as f64 / n).collect();
        let auc =
            thresholds.windows(2).zip(fractions.windows(2)).map(|(t, f)| (t[1] - t[0]) * (f[0] + f[1]) / 2.0).sum();
        Ok(Self { thresholds: thresholds.to_vec(), fractions, auc })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fraction\n");
        for (t, f) in self.thresholds.iter().zip(&self.fractions) {
            out.push_str(&format!("{t},{f}\n"));
        }
        out
    }
}

/// 101 uniform thresholds in `[0, 0.5]`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=100).map(|i| i as f64 * 0.005).collect()
}

/// Template graph geodesics normalized by the graph diameter.
#[derive(Debug, Clone)]
pub struct GeodesicMetric {
    distances: Vec<Vec<f64>>,
    pub diameter: f64,
}

impl GeodesicMetric {
    pub fn new(graph: &KnnGraph) -> Result<Self> {
        if !graph.is_connected() {
            return Err(Error::invalid("geodesic errors need a connected template graph"));
        }
        let distances = all_pairs_geodesics(graph);
        let diameter = distances.iter().flatten().copied().fold(0.0, f64::max);
        if !(diameter > 0.0) {
            return Err(Error::invalid("template graph has zero diameter"));
        }
        Ok(Self { distances, diameter })
    }

    pub fn errors(&self, pred: &[usize], gt: &[usize]) -> Result<Vec<f64>> {
        let n = self.distances.len();
        if pred.len() != gt.len() {
            return Err(Error::invalid(format!("{} vs {} correspondences", pred.len(), gt.len())));
        }
        if let Some(bad) = pred.iter().chain(gt).find(|&&i| i >= n) {
            return Err(Error::invalid(format!("vertex {bad} out of range for {n} nodes")));
        }
        Ok(pred.iter().zip(gt).map(|(&p, &g)| self.distances[p][g] / self.diameter).collect())
    }
}

/// Curve of normalized geodesic errors between predicted and true template
/// indices of each target point.
pub fn geodesic_error_curve(pred: &[usize], gt: &[usize], graph: &KnnGraph, thresholds: &[f64]) -> Result<ErrorCurve> {
    ErrorCurve::from_errors(&GeodesicMetric::new(graph)?.errors(pred, gt)?, thresholds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    #[default]
    Pipeline,
    /// Rigidly aligns the rest template to the target with ICP.
    RigidIcp,
}

/// One row of the method matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub name: String,
    pub kind: MethodKind,
    /// Index into the list of fields.
    pub field: usize,
    pub inference: InferenceMode,
    pub nicp: bool,
    pub fit: bool,
    pub chamfer: bool,
    pub displacements: bool,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            name: "lvd".into(),
            kind: MethodKind::Pipeline,
            field: 0,
            inference: InferenceMode::Lvd,
            nicp: false,
            fit: false,
            chamfer: false,
            displacements: false,
        }
    }
}

impl MethodConfig {
    pub fn stages(&self, iterations: usize, seed: u64) -> StageConfig {
        StageConfig {
            nicp: self.nicp,
            inference: self.inference,
            iterations,
            fit: self.fit,
            chamfer: self.chamfer,
            displacements: self.displacements,
            seed,
        }
    }

    /// Same configuration except for the NICP switch.
    fn nicp_twin_of(&self, other: &MethodConfig) -> bool {
        self.kind == MethodKind::Pipeline
            && other.kind == MethodKind::Pipeline
            && !other.nicp
            && self.nicp
            && MethodConfig { nicp: false, name: String::new(), ..self.clone() }
                == MethodConfig { name: String::new(), ..other.clone() }
    }
}

/// Field-stage method names for `segments` heads, with and without NICP.
pub fn default_methods(fields: &[NeuralDeformationField]) -> Vec<MethodConfig> {
    let mut out = Vec::new();
    for (i, f) in fields.iter().enumerate() {
        let base = MethodConfig { name: format!("l{}", f.head_count()), field: i, ..MethodConfig::default() };
        out.push(base.clone());
        out.push(MethodConfig { name: format!("l{}+nicp", f.head_count()), nicp: true, ..base });
    }
    if let Some(first) = fields.first() {
        out.push(MethodConfig {
            name: format!("l{}+nicp+fit+chamfer", first.head_count()),
            nicp: true,
            fit: true,
            chamfer: true,
            ..MethodConfig::default()
        });
        out.push(MethodConfig { name: "rigid_icp".into(), kind: MethodKind::RigidIcp, ..MethodConfig::default() });
    }
    out
}

/// Settings shared by every benchmark cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iterations: usize,
    pub seed: u64,
    pub thresholds: usize,
    pub max_threshold: f64,
    /// Rigid ICP baseline iteration cap and tolerance.
    pub icp_iterations: usize,
    pub icp_tolerance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iterations: LVD_ITERATIONS,
            seed: 0,
            thresholds: 101,
            max_threshold: 0.5,
            icp_iterations: 50,
            icp_tolerance: 1e-9,
        }
    }
}

impl EvalConfig {
    pub fn threshold_values(&self) -> Vec<f64> {
        let n = self.thresholds.max(2);
        (0..n).map(|i| self.max_threshold * i as f64 / (n - 1) as f64).collect()
    }
}

/// Metrics of one shape under one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub shape: usize,
    pub method: String,
    /// Mean v2v error in normalized units.
    pub v2v: f64,
    /// Mean v2v error in the shape's original units.
    pub v2v_raw: f64,
    pub geodesic_auc: f64,
    pub geodesic_fractions: Vec<f64>,
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub segments: Option<usize>,
    pub mean_v2v: f64,
    pub median_v2v: f64,
    /// Curve over every target point of every shape.
    pub curve: ErrorCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub without: String,
    pub with: String,
    pub rate: f64,
    /// `1 - mean(with) / mean(without)`.
    pub mean_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub segments: usize,
    pub method: String,
    pub mean_v2v: f64,
    pub median_v2v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub shapes: usize,
    pub methods: Vec<MethodConfig>,
    pub cells: Vec<CellResult>,
    pub summary: Vec<MethodSummary>,
    pub improvements: Vec<ImprovementRow>,
    pub ablation: Vec<AblationRow>,
}

impl BenchmarkReport {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == name)
    }

    /// Per-shape mean v2v errors of one method, in shape order.
    pub fn errors(&self, name: &str) -> Vec<f64> {
        self.cells.iter().filter(|c| c.method == name).map(|c| c.v2v).collect()
    }

    pub fn improvement(&self, without: &str, with: &str) -> Option<&ImprovementRow> {
        self.improvements.iter().find(|r| r.without == without && r.with == with)
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("shape,method,v2v,v2v_raw,geodesic_auc\n");
        for c in &self.cells {
            out.push_str(&format!("{},{},{},{},{}\n", c.shape, c.method, c.v2v, c.v2v_raw, c.geodesic_auc));
        }
        out
    }

    pub fn ablation_table(&self) -> String {
        let mut out = String::from("segments,method,mean_v2v,median_v2v\n");
        for r in &self.ablation {
            out.push_str(&format!("{},{},{},{}\n", r.segments, r.method, r.mean_v2v, r.median_v2v));
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

struct CellOutput {
    vertices_raw: Vec<Vec3>,
    timings: Vec<(String, f64)>,
}

fn run_cell(
    fields: &[NeuralDeformationField],
    template: &TemplateModel,
    pair: &GroundTruthPair,
    method: &MethodConfig,
    base: &RegisterConfig,
    eval: &EvalConfig,
    shape: usize,
) -> Result<CellOutput> {
    let raw = PointCloud::new(pair.normalization.inverse_all(pair.target.points()))?;
    match method.kind {
        MethodKind::RigidIcp => {
            let shift = raw.centroid() - centroid(&template.rest_vertices);
            let source: Vec<Vec3> = template.rest_vertices.iter().map(|v| v + shift).collect();
            let icp = rigid_icp(&source, raw.points(), eval.icp_iterations, eval.icp_tolerance)?;
            Ok(CellOutput { vertices_raw: icp.transform.apply_all(&source), timings: Vec::new() })
        }
        MethodKind::Pipeline => {
            let field = fields.get(method.field).ok_or_else(|| {
                Error::invalid(format!("method {} uses field {} of {}", method.name, method.field, fields.len()))
            })?;
            let cfg = RegisterConfig {
                stages: method.stages(eval.iterations, crate::template::derive_seed(eval.seed, shape as u64)),
                ..base.clone()
            };
            let r = register(field, template, &raw, &cfg)?;
            Ok(CellOutput { vertices_raw: r.vertices, timings: r.timings })
        }
    }
}

/// Registers every shape under every method and aggregates the metrics.
/// Cells run on up to `jobs` threads; results do not depend on `jobs`.
pub fn run_benchmark(
    fields: &[NeuralDeformationField],
    template: &TemplateModel,
    shapes: &[GroundTruthPair],
    methods: &[MethodConfig],
    base: &RegisterConfig,
    eval: &EvalConfig,
    jobs: usize,
) -> Result<BenchmarkReport> {
    if methods.is_empty() {
        return Err(Error::invalid("the method matrix is empty"));
    }
    if shapes.is_empty() {
        return Err(Error::invalid("the benchmark needs at least one shape"));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = methods.iter().find(|m| !seen.insert(m.name.as_str())) {
        return Err(Error::invalid(format!("duplicate method name {}", dup.name)));
    }
    let metric = GeodesicMetric::new(&template.graph)?;
    let thresholds = eval.threshold_values();
    let cells: Vec<(usize, usize)> = (0..shapes.len()).flat_map(|s| (0..methods.len()).map(move |m| (s, m))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    let evaluated: Vec<Result<(CellResult, Vec<f64>)>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(s, m)| {
                let pair = &shapes[s];
                let out = run_cell(fields, template, pair, &methods[m], base, eval, s)?;
                let pred = pair.normalization.forward_all(&out.vertices_raw);
                let (v2v, _) = v2v_error(&pred, &pair.gt_vertices)?;
                let (v2v_raw, _) = v2v_error(&out.vertices_raw, &pair.normalization.inverse_all(&pair.gt_vertices))?;
                let index = NearestIndex::build(&pred)?;
                let pred_corr = index.nearest_indices(pair.target.points());
                let errors = metric.errors(&pred_corr, &pair.gt_target_corr)?;
                let curve = ErrorCurve::from_errors(&errors, &thresholds)?;
                Ok((
                    CellResult {
                        shape: s,
                        method: methods[m].name.clone(),
                        v2v,
                        v2v_raw,
                        geodesic_auc: curve.auc,
                        geodesic_fractions: curve.fractions,
                        timings: out.timings,
                    },
                    errors,
                ))
            })
            .collect()
    });
    let mut results = Vec::with_capacity(evaluated.len());
    let mut pooled: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (k, r) in evaluated.into_iter().enumerate() {
        let (cell, errors) = r?;
        pooled.entry(cells[k].1).or_default().extend(errors);
        results.push(cell);
    }
    let segments = |m: &MethodConfig| match m.kind {
        MethodKind::Pipeline => fields.get(m.field).map(|f| f.head_count()),
        MethodKind::RigidIcp => None,
    };
    let mut summary = Vec::with_capacity(methods.len());
    for (i, m) in methods.iter().enumerate() {
        let errs: Vec<f64> = results.iter().filter(|c| c.method == m.name).map(|c| c.v2v).collect();
        summary.push(MethodSummary {
            method: m.name.clone(),
            segments: segments(m),
            mean_v2v: errs.iter().sum::<f64>() / errs.len() as f64,
            median_v2v: median(&errs),
            curve: ErrorCurve::from_errors(&pooled[&i], &thresholds)?,
        });
    }
    let per_method = |name: &str| -> Vec<f64> { results.iter().filter(|c| c.method == name).map(|c| c.v2v).collect() };
    let mut improvements = Vec::new();
    for with in methods {
        for without in methods {
            if with.nicp_twin_of(without) {
                let (a, b) = (per_method(&without.name), per_method(&with.name));
                let (ma, mb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
                improvements.push(ImprovementRow {
                    without: without.name.clone(),
                    with: with.name.clone(),
                    rate: improvement_rate(&a, &b)?,
                    mean_reduction: 1.0 - mb / ma,
                });
            }
        }
    }
    let distinct: std::collections::BTreeSet<usize> = methods.iter().filter_map(segments).collect();
    let ablation = if distinct.len() > 1 {
        summary
            .iter()
            .filter_map(|s| {
                s.segments.map(|segments| AblationRow {
                    segments,
                    method: s.method.clone(),
                    mean_v2v: s.mean_v2v,
                    median_v2v: s.median_v2v,
                })
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(BenchmarkReport {
        shapes: shapes.len(),
        methods: methods.to_vec(),
        cells: results,
        summary,
        improvements,
        ablation,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes report.json, summary.csv, curves/<method>.csv and, when present,
/// ablation.csv.
pub fn write_report(dir: &Path, report: &BenchmarkReport) -> Result<()> {
    let curves = dir.join("curves");
    fs::create_dir_all(&curves).map_err(|e| Error::io(&curves, e))?;
    let json = serde_json::to_string_pretty(report).expect("plain data");
    write_text(&dir.join("report.json"), &(json + "\n"))?;
    write_text(&dir.join("summary.csv"), &report.summary_csv())?;
    for s in &report.summary {
        write_text(&curves.join(format!("{}.csv", file_safe(&s.method))), &s.curve.to_csv())?;
    }
    if !report.ablation.is_empty() {
        write_text(&dir.join("ablation.csv"), &report.ablation_table())?;
    }
    Ok(())
}

fn file_safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '+' { c } else { '_' }).collect()
}
