//! Trains a small localized field on synthetic shapes, saves it, and
//! compares one-shot and iterative inference on a held-out target.
//!
//! cargo run --example train_field -- /tmp/field.nfrw

use std::path::PathBuf;

use nfreg::bench::v2v_error;
use nfreg::cli::{load_field, save_field};
use nfreg::field::{
    infer_vertices, train_field_with, EncoderConfig, HeadConfig, InferenceMode, NeuralDeformationField, TrainConfig,
    LVD_ITERATIONS,
};
use nfreg::template::{generate_dataset, sample_training_shape, GeneratorConfig, TemplateConfig};

fn main() -> nfreg::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("field.nfrw"));
    let template = TemplateConfig::default().build()?;
    let shapes = generate_dataset(&template, &GeneratorConfig { shapes: 60, seed: 1, ..GeneratorConfig::default() })?;
    let heads = HeadConfig { segments: 8, hidden: vec![32, 64, 64], reference_segments: 8, seed: 0 };
    let mut field = NeuralDeformationField::new(&template, &EncoderConfig::default(), &heads, 0.05)?;
    let config = TrainConfig { epochs: 2, lr: 1e-3, ..TrainConfig::default() };
    let history = train_field_with(&mut field, &shapes, &config, |p| {
        if p.step % 20 == 0 {
            println!("epoch {} step {:>3}: loss {:.5}", p.epoch, p.step, p.loss);
        }
    })?;
    println!("epoch means: {history:.5?}");
    save_field(&out, &field)?;

    let mut field = load_field(&out)?;
    let held_out = sample_training_shape(&template, 10_000, &GeneratorConfig::default())?;
    field.bind_target(&held_out.target)?;
    for (mode, iters) in [(InferenceMode::Oneshot, 1), (InferenceMode::Lvd, LVD_ITERATIONS)] {
        let v = infer_vertices(&field, mode, iters, 0)?;
        println!("{mode:?}: mean v2v {:.4}", v2v_error(&v, &held_out.gt_vertices)?.0);
    }
    Ok(())
}
