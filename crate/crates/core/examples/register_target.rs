//! Registers one raw target through every stage and writes the result
//! directory.
//!
//! Run `train_field` first; pass its archive path and an output directory.

use std::path::PathBuf;

use nfreg::bench::v2v_error;
use nfreg::cli::{format_timings, load_field};
use nfreg::fitting::{register, write_result, RegisterConfig, StageConfig};
use nfreg::geometry::PointCloud;
use nfreg::template::{sample_training_shape, GeneratorConfig};

fn main() -> nfreg::Result<()> {
    let mut args = std::env::args().skip(1).map(PathBuf::from);
    let weights = args.next().unwrap_or_else(|| std::env::temp_dir().join("field.nfrw"));
    let out = args.next().unwrap_or_else(|| std::env::temp_dir().join("nfreg-result"));
    let field = load_field(&weights)?;
    let template = field.template.build()?;
    let pair = sample_training_shape(&template, 30_000, &GeneratorConfig::default())?;
    let raw = PointCloud::new(pair.normalization.inverse_all(pair.target.points()))?;

    let config = RegisterConfig {
        stages: StageConfig { displacements: true, ..StageConfig::default() },
        ..RegisterConfig::default()
    };
    let result = register(&field, &template, &raw, &config)?;
    for stage in &result.stages {
        println!("{:<14} {:?}", stage.name, stage.status);
    }
    print!("{}", format_timings(&result.timings));
    let gt = pair.normalization.inverse_all(&pair.gt_vertices);
    println!("field vertices v2v {:.4}", v2v_error(&result.field_vertices, &gt)?.0);
    println!("final vertices v2v {:.4}", v2v_error(&result.vertices, &gt)?.0);
    write_result(&out, &result)?;
    println!("wrote {}", out.display());
    Ok(())
}
