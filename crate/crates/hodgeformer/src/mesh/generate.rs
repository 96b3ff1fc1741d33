//! Parametric shape generators for synthetic datasets and benchmarks.
//!
//! All generators produce closed, consistently outward-oriented triangle
//! meshes, deterministically for a given `(kind, resolution, seed, deform)`.
//! The vertex budget is validated to `50..=20000`.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::vec3::{self, Vec3};

pub const MIN_VERTICES: usize = 50;
pub const MAX_VERTICES: usize = 20000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// Icosphere; `resolution` is the subdivision depth (2 -> 162 vertices).
    Sphere,
    /// Unit cube with `resolution` segments per edge (`6*r^2 + 2` vertices).
    Cube,
    /// Torus with `3*resolution` major and `2*resolution` tube segments
    /// (`6*resolution^2` vertices), the one genus-1 generator.
    Torus,
    /// Capped cylinder with `2*resolution` angular and `resolution` vertical
    /// segments (`2*resolution*(resolution+1) + 2` vertices).
    Cylinder,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Torus,
        ShapeKind::Cylinder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Torus => "torus",
            ShapeKind::Cylinder => "cylinder",
        }
    }

    /// Vertex count the generator will produce at `resolution`.
    pub fn vertex_count(self, resolution: u32) -> usize {
        let r = resolution as usize;
        match self {
            ShapeKind::Sphere => 10 * 4usize.pow(resolution) + 2,
            ShapeKind::Cube => 6 * r * r + 2,
            ShapeKind::Torus => 6 * r * r,
            ShapeKind::Cylinder => 2 * r * (r + 1) + 2,
        }
    }
}

impl std::fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<ShapeKind> {
        match s {
            "sphere" => Ok(ShapeKind::Sphere),
            "cube" => Ok(ShapeKind::Cube),
            "torus" => Ok(ShapeKind::Torus),
            "cylinder" => Ok(ShapeKind::Cylinder),
            other => Err(Error::Config(format!(
                "unknown shape kind {other:?} (expected sphere, cube, torus or cylinder)"
            ))),
        }
    }
}

/// Generates a shape. `deform` is the maximum displacement applied by a
/// smooth random vector field (0 disables it); `seed` drives that field.
pub fn generate(kind: ShapeKind, resolution: u32, seed: u64, deform: f64) -> Result<Mesh> {
    if resolution == 0 {
        return Err(Error::Resolution(format!("{kind} resolution must be >= 1")));
    }
    if !deform.is_finite() || deform < 0.0 {
        return Err(Error::Config(format!(
            "deform must be a finite non-negative number, got {deform}"
        )));
    }
    let n_v = kind.vertex_count(resolution);
    if !(MIN_VERTICES..=MAX_VERTICES).contains(&n_v) {
        return Err(Error::Resolution(format!(
            "{kind} at resolution {resolution} has {n_v} vertices; \
             supported meshes have {MIN_VERTICES}..={MAX_VERTICES}"
        )));
    }
    let mut mesh = match kind {
        ShapeKind::Sphere => icosphere(resolution),
        ShapeKind::Cube => cube(resolution as usize),
        ShapeKind::Torus => torus(resolution as usize),
        ShapeKind::Cylinder => cylinder(resolution as usize),
    }?;
    if deform > 0.0 {
        apply_smooth_deformation(&mut mesh, seed, deform);
    }
    Ok(mesh)
}

/// UV sphere sized as close as possible to `n` vertices; used by the scaling
/// benchmark, which needs vertex counts the fixed-topology generators cannot
/// hit (powers of two).
pub fn sphere_with_vertex_count(n: usize) -> Result<Mesh> {
    if !(MIN_VERTICES..=MAX_VERTICES).contains(&n) {
        return Err(Error::Resolution(format!(
            "requested {n} vertices; supported meshes have {MIN_VERTICES}..={MAX_VERTICES}"
        )));
    }
    let interior = n - 2;
    let r0 = ((interior as f64 / 2.0).sqrt().round() as usize).max(3);
    let mut best = (usize::MAX, 3usize, 3usize);
    for r in r0.saturating_sub(2).max(3)..=r0 + 2 {
        let c = ((interior as f64 / r as f64).round() as usize).max(3);
        let diff = (r * c + 2).abs_diff(n);
        if diff < best.0 {
            best = (diff, r, c);
        }
    }
    Ok(uv_sphere(best.1, best.2))
}

/// Displaces vertices by a smooth random sinusoidal field scaled so the
/// largest displacement is exactly `deform`.
fn apply_smooth_deformation(mesh: &mut Mesh, seed: u64, deform: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Three output axes, two sinusoidal terms each.
    let mut terms = Vec::new();
    for _ in 0..3 {
        for _ in 0..2 {
            let dir = random_unit(&mut rng);
            let freq: f64 = rng.random_range(1.0..3.0);
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            let amp: f64 = rng.random_range(-1.0..1.0);
            terms.push((dir, freq, phase, amp));
        }
    }
    let field = |p: Vec3| -> Vec3 {
        let mut d = [0.0; 3];
        for (axis, chunk) in terms.chunks(2).enumerate() {
            for &(dir, freq, phase, amp) in chunk {
                d[axis] += amp * (freq * vec3::dot(dir, p) + phase).sin();
            }
        }
        d
    };
    let displacements: Vec<Vec3> = mesh.vertices.iter().map(|&p| field(p)).collect();
    let max_norm = displacements
        .iter()
        .map(|d| vec3::norm(*d))
        .fold(0.0, f64::max);
    if max_norm == 0.0 {
        return;
    }
    let scale = deform / max_norm;
    for (v, d) in mesh.vertices.iter_mut().zip(&displacements) {
        *v = vec3::add(*v, vec3::scale(*d, scale));
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = vec3::norm(v);
        if n > 1e-3 && n <= 1.0 {
            return vec3::scale(v, 1.0 / n);
        }
    }
}

fn icosphere(subdivisions: u32) -> Result<Mesh> {
    let t = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
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
    .iter()
    .map(|&v| vec3::normalize(v, 0.0).unwrap())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
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
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, vertices: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoint.entry(key).or_insert_with(|| {
                let m = vec3::scale(vec3::add(vertices[a], vertices[b]), 0.5);
                vertices.push(vec3::normalize(m, 0.0).unwrap());
                vertices.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    Mesh::new(vertices, faces)
}

fn cube(segments: usize) -> Result<Mesh> {
    let s = segments;
    let mut key_to_id: HashMap<(usize, usize, usize), usize> = HashMap::new();
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let coord = |k: usize| -> f64 { -1.0 + 2.0 * k as f64 / s as f64 };
    // (u index, v index) -> integer lattice point, chosen per cube face so
    // that u cross v points outward.
    let face_keys: [&dyn Fn(usize, usize) -> (usize, usize, usize); 6] = [
        &|i, j| (i, j, s), // +z
        &|i, j| (j, i, 0), // -z
        &|i, j| (j, s, i), // +y
        &|i, j| (i, 0, j), // -y
        &|i, j| (s, i, j), // +x
        &|i, j| (0, j, i), // -x
    ];
    for keyed in face_keys {
        let mut id = |i: usize, j: usize, vertices: &mut Vec<Vec3>| -> usize {
            let key = keyed(i, j);
            *key_to_id.entry(key).or_insert_with(|| {
                vertices.push([coord(key.0), coord(key.1), coord(key.2)]);
                vertices.len() - 1
            })
        };
        for i in 0..s {
            for j in 0..s {
                let a = id(i, j, &mut vertices);
                let b = id(i + 1, j, &mut vertices);
                let c = id(i + 1, j + 1, &mut vertices);
                let d = id(i, j + 1, &mut vertices);
                faces.extend([[a, b, c], [a, c, d]]);
            }
        }
    }
    Mesh::new(vertices, faces)
}

fn torus(resolution: usize) -> Result<Mesh> {
    let major = 3 * resolution;
    let tube = 2 * resolution;
    let (big_r, small_r) = (1.0, 0.4);
    let mut vertices = Vec::with_capacity(major * tube);
    for r in 0..major {
        let phi = 2.0 * PI * r as f64 / major as f64;
        for t in 0..tube {
            let theta = 2.0 * PI * t as f64 / tube as f64;
            let ring = big_r + small_r * theta.cos();
            vertices.push([
                ring * phi.cos(),
                ring * phi.sin(),
                small_r * theta.sin(),
            ]);
        }
    }
    let idx = |r: usize, t: usize| (r % major) * tube + (t % tube);
    let mut faces = Vec::with_capacity(2 * major * tube);
    for r in 0..major {
        for t in 0..tube {
            let a = idx(r, t);
            let b = idx(r + 1, t);
            let c = idx(r + 1, t + 1);
            let d = idx(r, t + 1);
            faces.extend([[a, b, c], [a, c, d]]);
        }
    }
    Mesh::new(vertices, faces)
}

fn cylinder(resolution: usize) -> Result<Mesh> {
    let nc = 2 * resolution; // around
    let nh = resolution; // along the axis
    let radius = 0.5;
    let mut vertices = Vec::with_capacity(nc * (nh + 1) + 2);
    for k in 0..=nh {
        let z = -1.0 + 2.0 * k as f64 / nh as f64;
        for j in 0..nc {
            let alpha = 2.0 * PI * j as f64 / nc as f64;
            vertices.push([radius * alpha.cos(), radius * alpha.sin(), z]);
        }
    }
    let bottom = vertices.len();
    vertices.push([0.0, 0.0, -1.0]);
    let top = vertices.len();
    vertices.push([0.0, 0.0, 1.0]);

    let ring = |k: usize, j: usize| k * nc + (j % nc);
    let mut faces = Vec::new();
    for k in 0..nh {
        for j in 0..nc {
            let a = ring(k, j);
            let b = ring(k, j + 1);
            let c = ring(k + 1, j + 1);
            let d = ring(k + 1, j);
            faces.extend([[a, b, c], [a, c, d]]);
        }
    }
    for j in 0..nc {
        faces.push([bottom, ring(0, j + 1), ring(0, j)]);
        faces.push([top, ring(nh, j), ring(nh, j + 1)]);
    }
    Mesh::new(vertices, faces)
}

fn uv_sphere(rings: usize, cols: usize) -> Mesh {
    let mut vertices = Vec::with_capacity(rings * cols + 2);
    for k in 1..=rings {
        let theta = PI * k as f64 / (rings + 1) as f64;
        for j in 0..cols {
            let alpha = 2.0 * PI * j as f64 / cols as f64;
            vertices.push([
                theta.sin() * alpha.cos(),
                theta.sin() * alpha.sin(),
                theta.cos(),
            ]);
        }
    }
    let north = vertices.len();
    vertices.push([0.0, 0.0, 1.0]);
    let south = vertices.len();
    vertices.push([0.0, 0.0, -1.0]);

    let ring = |k: usize, j: usize| k * cols + (j % cols);
    let mut faces = Vec::new();
    for k in 0..rings - 1 {
        for j in 0..cols {
            let a = ring(k, j);
            let b = ring(k, j + 1);
            let c = ring(k + 1, j + 1);
            let d = ring(k + 1, j);
            // Ring k is closer to the north pole (smaller theta); going from
            // ring k to k+1 moves south, so (a, d, c) then (a, c, b) are the
            // outward-facing triangles.
            faces.extend([[a, d, c], [a, c, b]]);
        }
    }
    for j in 0..cols {
        faces.push([north, ring(0, j), ring(0, j + 1)]);
        faces.push([south, ring(rings - 1, j + 1), ring(rings - 1, j)]);
    }
    Mesh::new(vertices, faces).expect("uv sphere construction is manifold")
}
