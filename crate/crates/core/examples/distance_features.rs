//! Builds the multi-resolution distance pyramid of a target and samples
//! per-query features from it.

use nfreg::geometry::{trilinear_sample, voxel_distance_pyramid, Vec3};
use nfreg::template::{sample_training_shape, GeneratorConfig, TemplateConfig};

fn main() -> nfreg::Result<()> {
    let template = TemplateConfig::default().build()?;
    let pair = sample_training_shape(&template, 3, &GeneratorConfig::default())?;
    let pyramid = voxel_distance_pyramid(pair.target.points(), 32, 4)?;
    println!("{} feature channels per query", pyramid.feature_len());
    for q in [Vec3::zeros(), pair.target.points()[0], Vec3::new(0.4, 0.4, 0.4)] {
        let f = trilinear_sample(&pyramid, &q);
        println!("query ({:+.2}, {:+.2}, {:+.2}): finest distance {:.4}", q.x, q.y, q.z, f[0]);
    }
    Ok(())
}
