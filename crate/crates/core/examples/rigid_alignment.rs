//! Recovers a rigid perturbation with Kabsch and point-to-point ICP.

use nfreg::geometry::{RigidTransform, Vec3};
use nfreg::nicp::{kabsch, rigid_icp};
use nfreg::template::TemplateConfig;

fn main() -> nfreg::Result<()> {
    let source = TemplateConfig::default().build()?.rest_vertices;
    let truth = RigidTransform::from_axis_angle(Vec3::new(0.2, -0.3, 0.25), Vec3::new(0.1, -0.05, 0.15));
    let target = truth.apply_all(&source);

    let direct = kabsch(&source, &target)?;
    println!("kabsch with known pairs: angle error {:.2e}", direct.compose(&truth.inverse()).rotation_angle());

    let mut shuffled = target.clone();
    shuffled.reverse();
    let icp = rigid_icp(&source, &shuffled, 50, 1e-12)?;
    println!("icp: {} iterations, final rmse {:.2e}", icp.rmse.len(), icp.rmse.last().copied().unwrap_or(0.0));
    Ok(())
}
