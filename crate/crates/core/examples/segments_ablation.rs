//! Trains fields with different head counts on the same shapes and runs the
//! benchmark harness over them, writing report files.
//!
//! cargo run --example segments_ablation -- /tmp/nfreg-ablation

use std::path::PathBuf;

use nfreg::bench::{run_benchmark, write_report, EvalConfig, MethodConfig};
use nfreg::field::{train_field, EncoderConfig, HeadConfig, NeuralDeformationField, TrainConfig};
use nfreg::fitting::RegisterConfig;
use nfreg::template::{generate_dataset, GeneratorConfig, TemplateConfig};

fn main() -> nfreg::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("nfreg-ablation"));
    let template = TemplateConfig::default().build()?;
    let train = generate_dataset(&template, &GeneratorConfig { shapes: 40, seed: 1, ..GeneratorConfig::default() })?;
    let test = generate_dataset(&template, &GeneratorConfig { shapes: 5, seed: 2, ..GeneratorConfig::default() })?;
    let config = TrainConfig { epochs: 2, lr: 1e-3, ..TrainConfig::default() };
    let mut fields = Vec::new();
    let mut methods = Vec::new();
    for (i, l) in [1, 4, 8].into_iter().enumerate() {
        let heads = HeadConfig { segments: l, hidden: vec![32, 64, 64], reference_segments: 8, seed: 0 };
        let mut field = NeuralDeformationField::new(&template, &EncoderConfig::default(), &heads, 0.05)?;
        let history = train_field(&mut field, &train, &config)?;
        println!("l = {l}: {} parameters, final loss {:.5}", field.params.scalar_count(), history.last().unwrap());
        fields.push(field);
        methods.push(MethodConfig { name: format!("l{l}"), field: i, ..MethodConfig::default() });
    }
    methods.push(MethodConfig { name: "l8+nicp".into(), field: 2, nicp: true, ..MethodConfig::default() });

    let report =
        run_benchmark(&fields, &template, &test, &methods, &RegisterConfig::default(), &EvalConfig::default(), 1)?;
    print!("{}", report.ablation_table());
    for row in &report.improvements {
        println!("{} over {}: rate {:.2}, mean reduction {:.3}", row.with, row.without, row.rate, row.mean_reduction);
    }
    write_report(&out, &report)?;
    println!("wrote {}", out.display());
    Ok(())
}
