//! Procedural shapes for tests, demos and desk-scale training sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{voxelize, Mesh, VoxelMode};
use crate::volume::{random_rotation, DensityVolume, Rotation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Torus,
    Blobs,
    Cube,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Sphere, ShapeKind::Torus, ShapeKind::Blobs, ShapeKind::Cube];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Torus => "torus",
            ShapeKind::Blobs => "blobs",
            ShapeKind::Cube => "cube",
        }
    }
}

/// Axis-aligned cube mesh spanning [-0.5, 0.5]^3, 12 outward-facing triangles.
pub fn cube_mesh() -> Mesh {
    let mut vertices = Vec::with_capacity(8);
    for i in 0..8 {
        vertices.push([
            if i & 1 == 0 { -0.5 } else { 0.5 },
            if i & 2 == 0 { -0.5 } else { 0.5 },
            if i & 4 == 0 { -0.5 } else { 0.5 },
        ]);
    }
    let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
    let mut triangles = Vec::with_capacity(12);
    for q in quads {
        triangles.push([q[0], q[1], q[2]]);
        triangles.push([q[0], q[2], q[3]]);
    }
    Mesh::new(vertices, triangles)
}

/// Unit-radius icosphere obtained by midpoint subdivision of an icosahedron.
pub fn icosphere(subdivisions: usize) -> Mesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<[f64; 3]> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .into_iter()
    .map(unit)
    .collect();
    let mut triangles: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints = std::collections::HashMap::new();
        let mut mid = |a: usize, b: usize, vertices: &mut Vec<[f64; 3]>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                let (p, q) = (vertices[a], vertices[b]);
                vertices.push(unit([(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0, (p[2] + q[2]) / 2.0]));
                vertices.len() - 1
            })
        };
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for [a, b, c] in triangles {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        triangles = next;
    }
    Mesh::new(vertices, triangles)
}

fn unit(p: [f64; 3]) -> [f64; 3] {
    let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    [p[0] / n, p[1] / n, p[2] / n]
}

fn apply(r: &Rotation, p: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

/// Occupancy from a point predicate evaluated at voxel centers, (x, y, z) relative to the grid center.
fn occupancy(side: usize, inside: impl Fn([f64; 3]) -> bool) -> DensityVolume {
    let c = (side as f64 - 1.0) / 2.0;
    DensityVolume::from_fn(side, 1.0, |z, y, x| {
        if inside([x as f64 - c, y as f64 - c, z as f64 - c]) {
            1.0
        } else {
            0.0
        }
    })
    .expect("side >= 1")
}

/// Binary occupancy of one random instance of `kind` on a `side`^3 grid.
pub fn shape_occupancy(kind: ShapeKind, side: usize, seed: u64) -> DensityVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5A9E);
    let s = side as f64;
    let jitter = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        [rng.random_range(-0.06..0.06) * s, rng.random_range(-0.06..0.06) * s, rng.random_range(-0.06..0.06) * s]
    };
    match kind {
        ShapeKind::Sphere => {
            let r = rng.random_range(0.18..0.32) * s;
            let o = jitter(&mut rng);
            occupancy(side, |p| (0..3).map(|a| (p[a] - o[a]).powi(2)).sum::<f64>() <= r * r)
        }
        ShapeKind::Torus => {
            let major = rng.random_range(0.2..0.28) * s;
            let minor = rng.random_range(0.07..0.11) * s;
            let rot = random_rotation(rng.random());
            let o = jitter(&mut rng);
            occupancy(side, |p| {
                // rotate into the torus frame (inverse = transpose)
                let d = [p[0] - o[0], p[1] - o[1], p[2] - o[2]];
                let q = [
                    rot[0][0] * d[0] + rot[1][0] * d[1] + rot[2][0] * d[2],
                    rot[0][1] * d[0] + rot[1][1] * d[1] + rot[2][1] * d[2],
                    rot[0][2] * d[0] + rot[1][2] * d[1] + rot[2][2] * d[2],
                ];
                let ring = (q[0] * q[0] + q[1] * q[1]).sqrt() - major;
                ring * ring + q[2] * q[2] <= minor * minor
            })
        }
        ShapeKind::Blobs => {
            let count = rng.random_range(3..6);
            let balls: Vec<([f64; 3], f64)> = (0..count)
                .map(|_| {
                    let c = [
                        rng.random_range(-0.2..0.2) * s,
                        rng.random_range(-0.2..0.2) * s,
                        rng.random_range(-0.2..0.2) * s,
                    ];
                    (c, rng.random_range(0.1..0.18) * s)
                })
                .collect();
            occupancy(side, |p| {
                balls
                    .iter()
                    .any(|(c, r)| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= r * r)
            })
        }
        ShapeKind::Cube => {
            let rot = random_rotation(rng.random());
            let mut mesh = cube_mesh();
            for v in &mut mesh.vertices {
                *v = apply(&rot, *v);
            }
            // voxelize fits the rotated cube to 90% of a smaller grid, then it is centered in `side`
            let inner = ((side as f64) * rng.random_range(0.45..0.65)).round().max(2.0) as usize;
            let vox = voxelize(&mesh, inner, VoxelMode::Solid).expect("cube mesh is valid");
            crate::volume::pad_or_crop(&vox, side).expect("side >= 1")
        }
    }
}

/// Separable Gaussian blur with zero padding; the kernel is truncated at 3 sigma.
pub fn gaussian_blur(vol: &DensityVolume, sigma: f64) -> DensityVolume {
    if sigma <= 0.0 {
        return vol.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let dims = vol.dims();
    let mut data: Vec<f64> = vol.data().iter().map(|&v| v as f64).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let mut out = vec![0.0; data.len()];
        for (idx, o) in out.iter_mut().enumerate() {
            let pos = ((idx / strides[axis]) % dims[axis]) as isize;
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let src = pos + k as isize - radius;
                if src >= 0 && src < n {
                    acc += w * data[(idx as isize + (src - pos) * strides[axis] as isize) as usize];
                }
            }
            *o = acc;
        }
        data = out;
    }
    vol.with_data(data.into_iter().map(|v| v as f32).collect()).expect("finite")
}

/// Smooth density for `kind`: occupancy blurred by one voxel.
pub fn shape_density(kind: ShapeKind, side: usize, seed: u64) -> DensityVolume {
    gaussian_blur(&shape_occupancy(kind, side, seed), 1.0)
}

/// A balanced set cycling through all shape kinds; item `i` uses seed `seed + i`.
pub fn shape_set(count: usize, side: usize, seed: u64) -> Vec<(String, DensityVolume)> {
    (0..count)
        .map(|i| {
            let kind = ShapeKind::ALL[i % ShapeKind::ALL.len()];
            let s = seed.wrapping_add(i as u64);
            let vol = shape_density(kind, side, s).with_origin(format!("{}-{s}", kind.name()));
            (format!("{}-{s}", kind.name()), vol)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_counts() {
        let m = icosphere(3);
        assert_eq!(m.triangles.len(), 20 * 64);
        assert_eq!(m.vertices.len(), 642);
        for v in &m.vertices {
            assert!(((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cube_mesh_is_closed() {
        let m = cube_mesh();
        // every edge shared by exactly two triangles
        let mut edges = std::collections::HashMap::new();
        for t in &m.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        assert!(edges.values().all(|&c| c == 2));
    }

    #[test]
    fn shapes_are_nonempty_and_seeded() {
        for kind in ShapeKind::ALL {
            let a = shape_occupancy(kind, 32, 1);
            let filled = a.data().iter().filter(|&&v| v > 0.5).count();
            assert!(filled > 200 && filled < 32 * 32 * 32 / 2, "{kind:?}: {filled}");
            assert_eq!(a, shape_occupancy(kind, 32, 1));
            assert_ne!(a, shape_occupancy(kind, 32, 2));
        }
    }

    #[test]
    fn blur_preserves_interior_mass() {
        let v = shape_occupancy(ShapeKind::Sphere, 24, 3);
        let b = gaussian_blur(&v, 1.0);
        let (m0, m1): (f64, f64) = (v.data().iter().map(|&x| x as f64).sum(), b.data().iter().map(|&x| x as f64).sum());
        assert!((m0 - m1).abs() / m0 < 1e-4);
    }
}
