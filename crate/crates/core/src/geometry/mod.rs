//! Point-cloud and graph primitives shared by every other module.

mod cloud;
mod graph;
mod grid;
mod spatial;

pub use cloud::{
    bbox, bbox_diagonal, centroid, format_xyz, normalize_cloud, write_xyz, Normalization, PointCloud, RigidTransform,
    Vec3,
};
pub use graph::{all_pairs_geodesics, build_knn_graph, graph_geodesics, graph_laplacian, Edge, KnnGraph, Weighting};
pub use grid::{
    trilinear_sample, voxel_distance_pyramid, voxel_distance_pyramid_in, DistanceGrid, DistanceGridPyramid, GridRegion,
    CHANNELS, NORMALIZED_HALF_EXTENT,
};
pub use spatial::{
    chamfer_distance, directed_chamfer, nearest_neighbor, ChamferMode, KdTree, NearestIndex, KD_TREE_THRESHOLD,
};
