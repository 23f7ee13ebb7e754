//! Builds the articulated template, samples a few posed and corrupted
//! targets, and writes them as a dataset directory.
//!
//! cargo run --example synthetic_dataset -- /tmp/nfreg-data

use std::path::PathBuf;

use nfreg::template::{read_dataset, write_dataset, CorruptionSpec, GeneratorConfig, TemplateConfig};

fn main() -> nfreg::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("nfreg-data"));
    let template = TemplateConfig::default().build()?;
    println!(
        "template: {} vertices, {} bones, diagonal {:.3}",
        template.vertex_count(),
        template.skeleton.len(),
        nfreg::geometry::bbox_diagonal(&template.rest_vertices)
    );
    let config = GeneratorConfig {
        shapes: 8,
        seed: 7,
        corruption: CorruptionSpec { jitter: 0.01, crop_fraction: 0.3, ..CorruptionSpec::default() },
        ..GeneratorConfig::default()
    };
    let manifest = write_dataset(&out, &template, &config)?;
    println!("wrote {} shapes to {}", manifest.shapes.len(), out.display());

    let data = read_dataset(&out)?;
    for (entry, pair) in data.manifest.shapes.iter().zip(&data.pairs) {
        println!("{}: {} target points, scale {:.3}", entry.name, pair.target.len(), pair.normalization.scale);
    }
    Ok(())
}
