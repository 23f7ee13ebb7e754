//! Fine-tunes a trained field on one corrupted target with neural ICP and
//! prints the loss trace and the error before and after.
//!
//! Run `train_field` first; pass its archive path as the argument.

use std::path::PathBuf;

use nfreg::bench::v2v_error;
use nfreg::cli::load_field;
use nfreg::field::{infer_vertices, InferenceMode, LVD_ITERATIONS};
use nfreg::nicp::{nicp_refine, NicpConfig};
use nfreg::template::{sample_training_shape, CorruptionSpec, GeneratorConfig};

fn main() -> nfreg::Result<()> {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("field.nfrw"));
    let mut field = load_field(&path)?;
    let template = field.template.build()?;
    let gen = GeneratorConfig {
        corruption: CorruptionSpec { jitter: 0.01, crop_fraction: 0.3, ..CorruptionSpec::default() },
        ..GeneratorConfig::default()
    };
    let pair = sample_training_shape(&template, 20_000, &gen)?;
    field.bind_target(&pair.target)?;
    let before = infer_vertices(&field, InferenceMode::Lvd, LVD_ITERATIONS, 0)?;
    let trace = nicp_refine(&mut field, &NicpConfig::default())?;
    let after = infer_vertices(&field, InferenceMode::Lvd, LVD_ITERATIONS, 0)?;
    print!("{}", trace.to_csv());
    println!("v2v before {:.4}", v2v_error(&before, &pair.gt_vertices)?.0);
    println!("v2v after  {:.4}", v2v_error(&after, &pair.gt_vertices)?.0);
    Ok(())
}
