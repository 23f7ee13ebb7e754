//! Procedural articulated template: a capsule skeleton with linear blend
//! skinning, pose and shape sampling, and synthetic registered datasets.

mod data;
mod model;
mod pose;
mod skeleton;

pub use data::{
    corrupt_cloud, derive_seed, generate_dataset, read_dataset, read_manifest, read_pair, sample_params,
    sample_training_shape, shape_name, write_dataset, write_pair, CorruptionSpec, Dataset, DatasetManifest,
    GeneratorConfig, GroundTruthPair, ShapeEntry,
};
pub use model::{
    build_template, sample_capsule_union, skinning_sigma, skinning_weights, Capsule, TemplateConfig, TemplateModel,
    TEMPLATE_KNN,
};
pub use pose::{
    bone_frames, pose_template, pose_template_tape, posed_capsules, BoneFrame, ParamLayout, PoseShapeParams, MAX_SCALE,
    MIN_SCALE,
};
pub use skeleton::{Bone, SkeletonSpec};
