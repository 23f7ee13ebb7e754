//! Configuration files, weight archives and the `nfreg` subcommands.

mod archive;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use archive::{
    load_field, save_field, ArchiveManifest, TensorEntry, WeightArchive, ARCHIVE_MAGIC, ARCHIVE_VERSION,
};

use crate::bench::{default_methods, run_benchmark, write_report, BenchmarkReport, EvalConfig, MethodConfig};
use crate::error::{Error, Result};
use crate::field::{train_field_with, EncoderConfig, HeadConfig, NeuralDeformationField, TrainConfig};
use crate::fitting::{register, write_result, RefineConfig, RegisterConfig, RegistrationResult, StageConfig};
use crate::geometry::{ChamferMode, PointCloud};
use crate::nicp::NicpConfig;
use crate::template::{read_dataset, write_dataset, GeneratorConfig};

/// Exit code for input, configuration and I/O errors.
pub const EXIT_INPUT: i32 = 2;
/// Exit code for unsupported weight archive versions.
pub const EXIT_VERSION: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Version { .. } => EXIT_VERSION,
        _ => EXIT_INPUT,
    }
}

/// Method matrix and metric settings for `eval`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(flatten)]
    pub metrics: EvalConfig,
    /// Empty means the default matrix for the supplied fields.
    pub methods: Vec<MethodConfig>,
}

/// Every tunable of the toolkit, one TOML section per stage.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
    pub training: TrainConfig,
    pub nicp: NicpConfig,
    pub refine: RefineConfig,
    pub stages: StageConfig,
    pub evaluation: EvaluationConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::parse("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            other => other,
        })
    }

    /// Defaults when no path is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.heads.validate()?;
        self.training.validate()?;
        self.register_config().validate()
    }

    pub fn register_config(&self) -> RegisterConfig {
        RegisterConfig { stages: self.stages.clone(), nicp: self.nicp.clone(), refine: self.refine.clone() }
    }
}

/// Stage switches of `nfreg register`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegisterFlags {
    pub no_nicp: bool,
    pub no_chamfer: bool,
    pub displacements: bool,
    pub one_directional: bool,
    pub seed: Option<u64>,
}

impl RegisterFlags {
    pub fn apply(&self, mut cfg: RegisterConfig) -> RegisterConfig {
        cfg.stages.nicp &= !self.no_nicp;
        cfg.stages.chamfer &= !self.no_chamfer;
        cfg.stages.displacements |= self.displacements;
        if self.one_directional {
            cfg.refine.chamfer_mode = ChamferMode::AToB;
        }
        if let Some(seed) = self.seed {
            cfg.stages.seed = seed;
            cfg.nicp.seed = seed;
        }
        cfg
    }
}

/// Writes a synthetic dataset and returns its shape count.
pub fn cmd_gen_data(config: &PipelineConfig, out: &Path) -> Result<usize> {
    config.generator.validate()?;
    let template = config.generator.template.build()?;
    let manifest = write_dataset(out, &template, &config.generator)?;
    Ok(manifest.shapes.len())
}

/// Loss history file written next to a weight archive.
pub fn loss_csv_path(weights: &Path) -> PathBuf {
    weights.with_extension("loss.csv")
}

/// Trains a fresh field on a dataset, writes the archive and its loss CSV,
/// and returns the per-epoch mean losses.
pub fn cmd_train(
    config: &PipelineConfig,
    dataset: &Path,
    out: &Path,
    progress: impl FnMut(crate::field::TrainProgress),
) -> Result<Vec<f64>> {
    config.training.validate()?;
    let data = read_dataset(dataset)?;
    let mut field =
        NeuralDeformationField::new(&data.template, &config.encoder, &config.heads, config.training.offset_cap)?;
    let history = train_field_with(&mut field, &data.pairs, &config.training, progress)?;
    save_field(out, &field)?;
    let mut csv = String::from("epoch,mean_loss\n");
    for (e, l) in history.iter().enumerate() {
        csv.push_str(&format!("{e},{l}\n"));
    }
    let path = loss_csv_path(out);
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(history)
}

/// Registers one raw target cloud and writes the result directory.
pub fn cmd_register(
    config: &PipelineConfig,
    weights: &Path,
    target: &Path,
    out: &Path,
    flags: &RegisterFlags,
) -> Result<RegistrationResult> {
    let field = load_field(weights)?;
    let template = field.template.build()?;
    let cloud = PointCloud::read_xyz(target)?;
    let cfg = flags.apply(config.register_config());
    cfg.validate()?;
    let result = register(&field, &template, &cloud, &cfg)?;
    write_result(out, &result)?;
    Ok(result)
}

/// Benchmarks every field on a test dataset and writes the report files.
pub fn cmd_eval(
    config: &PipelineConfig,
    weights: &[PathBuf],
    test: &Path,
    out: &Path,
    jobs: usize,
) -> Result<BenchmarkReport> {
    if weights.is_empty() {
        return Err(Error::invalid("eval needs at least one weight archive"));
    }
    let fields = weights.iter().map(|w| load_field(w)).collect::<Result<Vec<_>>>()?;
    let data = read_dataset(test)?;
    if let Some(f) = fields.iter().find(|f| f.template_hash != data.manifest.template_hash) {
        return Err(Error::invalid(format!(
            "field template {} does not match the dataset template {}",
            f.template_hash, data.manifest.template_hash
        )));
    }
    let methods =
        if config.evaluation.methods.is_empty() { default_methods(&fields) } else { config.evaluation.methods.clone() };
    let base = config.register_config();
    let report =
        run_benchmark(&fields, &data.template, &data.pairs, &methods, &base, &config.evaluation.metrics, jobs)?;
    write_report(out, &report)?;
    Ok(report)
}

/// Mean seconds per stage name, in first-seen order.
pub fn mean_timings<'a>(runs: impl IntoIterator<Item = &'a [(String, f64)]>) -> Vec<(String, f64)> {
    let mut acc: Vec<(String, f64, usize)> = Vec::new();
    for run in runs {
        for (name, secs) in run {
            match acc.iter_mut().find(|(n, _, _)| n == name) {
                Some(entry) => {
                    entry.1 += secs;
                    entry.2 += 1;
                }
                None => acc.push((name.clone(), *secs, 1)),
            }
        }
    }
    acc.into_iter().map(|(n, s, c)| (n, s / c as f64)).collect()
}

pub fn format_timings(timings: &[(String, f64)]) -> String {
    timings.iter().map(|(n, s)| format!("{n:>14}: {:>9.3} ms\n", s * 1e3)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitting::StageStatus;
    use crate::template::read_pair;

    #[test]
    fn shipped_desk_config_parses() {
        let cfg = PipelineConfig::from_toml(include_str!("../../configs/desk.toml")).unwrap();
        assert_eq!(cfg.generator.shapes, 2000);
        assert_eq!(cfg.evaluation.methods.len(), 4);
        assert_eq!(cfg.evaluation.methods[3].kind, crate::bench::MethodKind::RigidIcp);
        assert_eq!(cfg.nicp, NicpConfig::default());
    }

    fn tiny() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.generator.shapes = 3;
        c.generator.points = 300;
        c.generator.template.vertices = 60;
        c.encoder = EncoderConfig { base_resolution: 8, levels: 2 };
        c.heads = HeadConfig { segments: 2, hidden: vec![8], reference_segments: 2, seed: 0 };
        c.training.epochs = 2;
        c.training.uniform_queries = 20;
        c.training.surface_queries = 40;
        c.nicp.steps = 2;
        c.nicp.max_samples = 64;
        c.stages.iterations = 5;
        c.refine.fit_steps = 20;
        c.refine.chamfer_steps = 5;
        c.refine.displacement_steps = 5;
        c.evaluation.metrics.iterations = 5;
        c.evaluation.metrics.icp_iterations = 3;
        c
    }

    #[test]
    fn config_round_trips_through_toml() {
        for cfg in [PipelineConfig::default(), tiny()] {
            let text = cfg.to_toml();
            assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = PipelineConfig::from_toml("[training]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.training.epochs, 3);
        assert_eq!(cfg.heads.segments, 16);
        assert_eq!(cfg.nicp, NicpConfig::default());
    }

    #[test]
    fn invalid_values_name_their_key() {
        let err = PipelineConfig::from_toml("[generator.corruption]\ncrop_fraction = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("crop_fraction"), "{err}");
        assert_eq!(exit_code(&err), EXIT_INPUT);
        let err = PipelineConfig::from_toml("[training]\nepochs = 3\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn gen_data_is_reproducible() {
        let mut cfg = tiny();
        cfg.generator.shapes = 10;
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        assert_eq!(cmd_gen_data(&cfg, &a).unwrap(), 10);
        cmd_gen_data(&cfg, &b).unwrap();
        let subdirs = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
        assert_eq!(subdirs, 10);
        assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
        for f in ["target.xyz", "gt_vertices.xyz", "params.json"] {
            let name = crate::template::shape_name(7);
            assert_eq!(fs::read(a.join(&name).join(f)).unwrap(), fs::read(b.join(&name).join(f)).unwrap());
        }
    }

    #[test]
    fn train_register_and_eval_compose() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        cmd_gen_data(&cfg, &data).unwrap();
        let weights = dir.path().join("w.nfrw");
        let history = cmd_train(&cfg, &data, &weights, |_| {}).unwrap();
        assert_eq!(history.len(), 2);
        let csv = fs::read_to_string(dir.path().join("w.loss.csv")).unwrap();
        assert!(csv.starts_with("epoch,mean_loss\n"));
        assert_eq!(csv.lines().count(), 3);
        let field = load_field(&weights).unwrap();
        assert_eq!(field.head_count(), 2);

        let pair =
            read_pair(&data.join(crate::template::shape_name(0)), cfg.generator.template.skeleton.len()).unwrap();
        let target = dir.path().join("raw.xyz");
        crate::geometry::write_xyz(&target, &pair.normalization.inverse_all(pair.target.points())).unwrap();

        let all = cmd_register(&cfg, &weights, &target, &dir.path().join("r0"), &RegisterFlags::default()).unwrap();
        for name in ["normalize", "nicp", "inference", "fit", "chamfer"] {
            assert_eq!(all.stage(name).unwrap().status, StageStatus::Ran, "{name}");
        }
        let flags = RegisterFlags { no_nicp: true, seed: Some(4), ..RegisterFlags::default() };
        let skipped = cmd_register(&cfg, &weights, &target, &dir.path().join("r1"), &flags).unwrap();
        assert_eq!(skipped.stage("nicp").unwrap().status, StageStatus::Skipped);
        cmd_register(&cfg, &weights, &target, &dir.path().join("r2"), &flags).unwrap();
        for f in ["vertices.xyz", "field_vertices.xyz", "params.json", "diagnostics.json"] {
            assert_eq!(
                fs::read(dir.path().join("r1").join(f)).unwrap(),
                fs::read(dir.path().join("r2").join(f)).unwrap()
            );
        }

        let mut one = cfg.clone();
        one.generator.shapes = 1;
        let test = dir.path().join("test");
        cmd_gen_data(&one, &test).unwrap();
        one.evaluation.methods = vec![MethodConfig::default()];
        let report = cmd_eval(&one, std::slice::from_ref(&weights), &test, &dir.path().join("eval"), 1).unwrap();
        assert_eq!(report.cells.len(), 1);
        assert!(dir.path().join("eval/report.json").exists());

        let missing = cmd_eval(&one, &[weights], &dir.path().join("nope"), &dir.path().join("eval2"), 1).unwrap_err();
        assert_eq!(exit_code(&missing), EXIT_INPUT);
    }

    #[test]
    fn default_segment_count_is_sixteen() {
        assert_eq!(PipelineConfig::default().heads.segments, 16);
    }

    #[test]
    fn version_mismatch_maps_to_exit_three() {
        let err = Error::Version { found: 2, supported: 1 };
        assert_eq!(exit_code(&err), EXIT_VERSION);
    }

    #[test]
    fn register_flags_override_stages() {
        let flags =
            RegisterFlags { no_chamfer: true, displacements: true, one_directional: true, ..RegisterFlags::default() };
        let cfg = flags.apply(RegisterConfig::default());
        assert!(cfg.stages.nicp && !cfg.stages.chamfer && cfg.stages.displacements);
        assert_eq!(cfg.refine.chamfer_mode, ChamferMode::AToB);
    }
}
