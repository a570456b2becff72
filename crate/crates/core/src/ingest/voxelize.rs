use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::mesh::Mesh;
use crate::volume::DensityVolume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoxelMode {
    Surface,
    Solid,
}

#[derive(Debug, Error, PartialEq)]
pub enum VoxelizeError {
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("resolution must be at least 2, got {0}")]
    Resolution(usize),
}

/// Fraction of the grid edge the mesh bounding cube occupies.
pub const FIT_FRACTION: f64 = 0.9;

// Cells are half-open [i, i+1) along each axis, so a plane lying exactly on a cell
// boundary marks a single layer. Grid coordinates are snapped to a dyadic lattice so
// the comparisons against integer cell faces are exact.
const SNAP: f64 = (1u64 << 20) as f64;
const TOL: f64 = 1e-12;

/// Rasterize a triangle mesh into an occupancy grid of side `resolution`.
///
/// Mesh (x, y, z) maps to volume index (z, y, x). The mesh is scaled uniformly so its
/// largest bounding-box edge spans 90% of the grid, centered.
pub fn voxelize(mesh: &Mesh, resolution: usize, mode: VoxelMode) -> Result<DensityVolume, VoxelizeError> {
    if resolution < 2 {
        return Err(VoxelizeError::Resolution(resolution));
    }
    if mesh.is_empty() {
        return Err(VoxelizeError::EmptyMesh);
    }
    let n = resolution;
    let (lo, hi) = mesh.bounds().ok_or(VoxelizeError::EmptyMesh)?;
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
    let scale = if extent > 0.0 { FIT_FRACTION * n as f64 / extent } else { 1.0 };
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
    let half_grid = n as f64 / 2.0;
    let to_grid = |p: [f64; 3]| -> [f64; 3] {
        [0, 1, 2].map(|a| (((p[a] - center[a]) * scale + half_grid) * SNAP).round() / SNAP)
    };

    let mut occ = vec![false; n * n * n];
    for t in 0..mesh.triangles.len() {
        let tri = mesh.triangle(t).map(to_grid);
        let mut lo_i = [0usize; 3];
        let mut hi_i = [0usize; 3];
        for a in 0..3 {
            let mn = tri.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min);
            let mx = tri.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max);
            lo_i[a] = (mn.floor().max(0.0) as usize).min(n - 1);
            hi_i[a] = (mx.floor().max(0.0) as usize).min(n - 1);
        }
        for z in lo_i[2]..=hi_i[2] {
            for y in lo_i[1]..=hi_i[1] {
                for x in lo_i[0]..=hi_i[0] {
                    let idx = (z * n + y) * n + x;
                    if occ[idx] {
                        continue;
                    }
                    let cell = [x, y, z];
                    let outside_upper = (0..3).any(|a| tri.iter().all(|p| p[a] >= (cell[a] + 1) as f64));
                    if outside_upper {
                        continue;
                    }
                    let c = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                    if triangle_box_overlap(c, 0.5, &tri) {
                        occ[idx] = true;
                    }
                }
            }
        }
    }
    if mode == VoxelMode::Solid {
        fill_interior(&mut occ, n);
    }
    let data = occ.into_iter().map(|o| if o { 1.0 } else { 0.0 }).collect();
    Ok(DensityVolume::new([n; 3], data, 1.0).expect("valid grid"))
}

/// Mark every cell not reachable from the boundary through empty cells (6-connectivity).
fn fill_interior(occ: &mut [bool], n: usize) {
    let mut outside = vec![false; occ.len()];
    let mut queue = VecDeque::new();
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let on_face = [z, y, x].iter().any(|&i| i == 0 || i == n - 1);
                let idx = (z * n + y) * n + x;
                if on_face && !occ[idx] {
                    outside[idx] = true;
                    queue.push_back((z, y, x));
                }
            }
        }
    }
    while let Some((z, y, x)) = queue.pop_front() {
        let mut visit = |z: usize, y: usize, x: usize| {
            let idx = (z * n + y) * n + x;
            if !occ[idx] && !outside[idx] {
                outside[idx] = true;
                queue.push_back((z, y, x));
            }
        };
        if z > 0 {
            visit(z - 1, y, x);
        }
        if z + 1 < n {
            visit(z + 1, y, x);
        }
        if y > 0 {
            visit(z, y - 1, x);
        }
        if y + 1 < n {
            visit(z, y + 1, x);
        }
        if x > 0 {
            visit(z, y, x - 1);
        }
        if x + 1 < n {
            visit(z, y, x + 1);
        }
    }
    for (o, out) in occ.iter_mut().zip(outside) {
        *o = !out;
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Separating-axis test between a cube (center, half edge) and a triangle.
pub fn triangle_box_overlap(center: [f64; 3], half: f64, tri: &[[f64; 3]; 3]) -> bool {
    let v = [sub(tri[0], center), sub(tri[1], center), sub(tri[2], center)];
    // box face normals
    for a in 0..3 {
        let mn = v[0][a].min(v[1][a]).min(v[2][a]);
        let mx = v[0][a].max(v[1][a]).max(v[2][a]);
        if mn > half + TOL || mx < -half - TOL {
            return false;
        }
    }
    let e = [sub(v[1], v[0]), sub(v[2], v[1]), sub(v[0], v[2])];
    // edge x box-axis cross products
    for edge in &e {
        for a in 0..3 {
            let mut axis = [0.0; 3];
            axis[a] = 1.0;
            let l = cross(axis, *edge);
            let p = [dot(l, v[0]), dot(l, v[1]), dot(l, v[2])];
            let r = half * (l[0].abs() + l[1].abs() + l[2].abs()) * (1.0 + TOL) + TOL;
            let mn = p[0].min(p[1]).min(p[2]);
            let mx = p[0].max(p[1]).max(p[2]);
            if mn > r || mx < -r {
                return false;
            }
        }
    }
    // triangle plane
    let normal = cross(e[0], e[1]);
    let d = dot(normal, v[0]);
    let r = half * (normal[0].abs() + normal[1].abs() + normal[2].abs()) * (1.0 + TOL) + TOL;
    d.abs() <= r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_basic_cases() {
        let tri = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert!(triangle_box_overlap([0.2, 0.2, 0.0], 0.1, &tri));
        assert!(!triangle_box_overlap([0.2, 0.2, 0.5], 0.1, &tri));
        // beyond the hypotenuse but inside the bounding box
        assert!(!triangle_box_overlap([0.8, 0.8, 0.0], 0.1, &tri));
    }

    #[test]
    fn rejects_bad_input() {
        let m = Mesh::new(vec![[0.0; 3]], vec![]);
        assert_eq!(voxelize(&m, 8, VoxelMode::Solid), Err(VoxelizeError::EmptyMesh));
        let m = Mesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]);
        assert_eq!(voxelize(&m, 1, VoxelMode::Surface), Err(VoxelizeError::Resolution(1)));
    }

    #[test]
    fn flood_fill_closes_hollow_box() {
        let n = 5;
        let mut occ = vec![false; n * n * n];
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    if [z, y, x].iter().any(|&i| i == 1 || i == 3) {
                        occ[(z * n + y) * n + x] = true;
                    }
                }
            }
        }
        fill_interior(&mut occ, n);
        assert!(occ[(2 * n + 2) * n + 2]);
        assert_eq!(occ.iter().filter(|&&o| o).count(), 27);
    }
}
