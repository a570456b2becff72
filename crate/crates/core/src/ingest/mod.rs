//! Mesh and map parsers, voxelization, masking and dataset manifests.

pub mod emdb;
pub mod manifest;
pub mod mask;
pub mod mesh;
pub mod mrc;
pub mod voxelize;

pub use emdb::{EmdbClient, EmdbConfig, EmdbError, EmdbRecord};
pub use manifest::{curate, split_dataset, CurationFilters, DatasetManifest, Exclusion, ManifestEntry, ManifestError, Split};
pub use mask::{apply_contour_mask, DEFAULT_DILATION};
pub use mesh::{parse_obj, parse_off, Mesh, MeshError, MeshErrorKind};
pub use mrc::{read_map_bytes, read_mrc, write_mrc, MrcError, MrcHeader};
pub use voxelize::{voxelize, VoxelMode, VoxelizeError};

/// Parse a mesh, choosing the format from the file extension.
pub fn parse_mesh(path: &std::path::Path, bytes: &[u8]) -> Result<Mesh, MeshError> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("obj") => parse_obj(bytes),
        _ => parse_off(bytes),
    }
}
