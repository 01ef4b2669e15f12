//! Synthetic supershape data: parameterized shapes, correspondence points,
//! voxelized images with Gaussian intensities and blur, and the on-disk
//! dataset layout.

mod dataset;
mod image;
mod mesh;
mod points;
mod superformula;
mod volume;
mod voxel;

pub use dataset::{
    assign_splits, build_dataset, generate_sample, generate_shape, sample_id, sample_rng,
    Dataset, DatasetConfig, DatasetManifest, GeneratedShape, Sample, SampleRecord, Split,
    MANIFEST_FILE, TEMPLATE_FILE,
};
pub use image::{gaussian_blur, gaussian_kernel, synthesize_image, IntensityConfig};
pub use mesh::{point_triangle_distance, GridTransform, SurfaceMesh, Vec3, GRID_FILL};
pub use points::{template_mesh, PointModel};
pub use superformula::{
    fibonacci_parameters, superformula_radius, supershape_point, SupershapeParams,
    EXPONENT_FLOOR,
};
pub use volume::{Volume, VolumeHeader};
pub use voxel::{voxelize, winding_number};

pub(crate) use mesh::{add, norm, scale, sub};
