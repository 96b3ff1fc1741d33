//! Raw geometric input features per mesh element, plus train-time
//! augmentation.
//!
//! Layouts (all coordinates in mesh units, extraction is pure):
//!
//! - vertices, 7 columns: position (3), area-weighted unit normal (3),
//!   barycentric cell area = 1/3 of the incident face area sum (1);
//! - edges, 20 columns: both endpoint positions in canonical low-id-first
//!   order (6), the opposite vertex of each incident face in ascending face
//!   order (6, zero-padded on boundaries), unit edge normal = normalized
//!   mean of the endpoint vertex normals (3), own length plus the lengths of
//!   the up-to-4 remaining edges of the incident faces (5, zero-padded);
//! - faces, 13 columns: corner positions in traversal order (9), unit face
//!   normal (3), area (1).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mesh::adjacency::AdjacencyStructures;
use crate::mesh::Mesh;
use crate::vec3::{self, Vec3};

pub const VERTEX_COLUMNS: [&str; 7] = ["x", "y", "z", "nx", "ny", "nz", "area"];
pub const EDGE_COLUMNS: [&str; 20] = [
    "a_x", "a_y", "a_z", "b_x", "b_y", "b_z", "opp1_x", "opp1_y", "opp1_z", "opp2_x", "opp2_y",
    "opp2_z", "n_x", "n_y", "n_z", "len", "len_1", "len_2", "len_3", "len_4",
];
pub const FACE_COLUMNS: [&str; 13] = [
    "v0_x", "v0_y", "v0_z", "v1_x", "v1_y", "v1_z", "v2_x", "v2_y", "v2_z", "n_x", "n_y", "n_z",
    "area",
];

const EPS: f64 = 1e-12;

/// Dense row-major f64 matrix used for host-side (non-differentiated) data.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> FeatureMatrix {
        FeatureMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// All three feature matrices plus non-fatal extraction notes (isolated
/// vertices, zero-norm normals that fell back to zero vectors).
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub x_v: FeatureMatrix,
    pub x_e: FeatureMatrix,
    pub x_f: FeatureMatrix,
    pub diagnostics: Vec<String>,
}

pub fn extract(mesh: &Mesh) -> Result<FeatureSet> {
    let mut diagnostics = Vec::new();
    let geo = FaceGeometry::compute(mesh)?;
    let (x_v, vertex_normals) = vertex_features(mesh, &geo, &mut diagnostics);
    let x_e = edge_features(mesh, &vertex_normals, &mut diagnostics)?;
    let x_f = face_features(mesh, &geo);
    Ok(FeatureSet {
        x_v,
        x_e,
        x_f,
        diagnostics,
    })
}

/// Per-face cross products, unit normals and areas.
struct FaceGeometry {
    cross: Vec<Vec3>,
    normal: Vec<Vec3>,
    area: Vec<f64>,
}

impl FaceGeometry {
    fn compute(mesh: &Mesh) -> Result<FaceGeometry> {
        let mut cross = Vec::with_capacity(mesh.n_faces());
        let mut normal = Vec::with_capacity(mesh.n_faces());
        let mut area = Vec::with_capacity(mesh.n_faces());
        for (f, &[a, b, c]) in mesh.faces().iter().enumerate() {
            let cr = vec3::cross(
                vec3::sub(mesh.vertices[b], mesh.vertices[a]),
                vec3::sub(mesh.vertices[c], mesh.vertices[a]),
            );
            let n = vec3::norm(cr);
            if n < EPS {
                return Err(Error::DegenerateGeometry(format!(
                    "face {f} has zero area; features are undefined"
                )));
            }
            cross.push(cr);
            normal.push(vec3::scale(cr, 1.0 / n));
            area.push(0.5 * n);
        }
        Ok(FaceGeometry {
            cross,
            normal,
            area,
        })
    }
}

fn vertex_features(
    mesh: &Mesh,
    geo: &FaceGeometry,
    diagnostics: &mut Vec<String>,
) -> (FeatureMatrix, Vec<Vec3>) {
    let n_v = mesh.n_vertices();
    // Area-weighted normal accumulator: sum of face cross products (each
    // cross product is 2 * area * unit normal, so the weighting is built in).
    let mut acc = vec![[0.0; 3]; n_v];
    let mut cell_area = vec![0.0; n_v];
    let mut incident = vec![0usize; n_v];
    for (f, face) in mesh.faces().iter().enumerate() {
        for &v in face {
            acc[v] = vec3::add(acc[v], geo.cross[f]);
            cell_area[v] += geo.area[f] / 3.0;
            incident[v] += 1;
        }
    }
    let mut x = FeatureMatrix::zeros(n_v, 7);
    let mut normals = vec![[0.0; 3]; n_v];
    for v in 0..n_v {
        let row = x.row_mut(v);
        row[..3].copy_from_slice(&mesh.vertices[v]);
        if incident[v] == 0 {
            diagnostics.push(format!(
                "vertex {v} has no incident faces; normal and cell area set to zero"
            ));
        } else if let Some(n) = vec3::normalize(acc[v], EPS) {
            normals[v] = n;
        } else {
            diagnostics.push(format!(
                "vertex {v} has a zero-sum face normal; normal set to zero"
            ));
        }
        row[3..6].copy_from_slice(&normals[v]);
        row[6] = cell_area[v];
    }
    (x, normals)
}

fn edge_features(
    mesh: &Mesh,
    vertex_normals: &[Vec3],
    diagnostics: &mut Vec<String>,
) -> Result<FeatureMatrix> {
    let n_e = mesh.n_edges();
    let mut x = FeatureMatrix::zeros(n_e, 20);
    for (e, &(a, b)) in mesh.edges().iter().enumerate() {
        let (pa, pb) = (mesh.vertices[a], mesh.vertices[b]);
        let own_len = vec3::norm(vec3::sub(pb, pa));
        if own_len < EPS {
            return Err(Error::DegenerateGeometry(format!(
                "edge {e} (vertices {a}, {b}) has zero length; features are undefined"
            )));
        }
        let row = x.row_mut(e);
        row[0..3].copy_from_slice(&pa);
        row[3..6].copy_from_slice(&pb);

        // Incident faces ascend by construction; opposite vertex slots and
        // other-edge length slots fill in that order, zero-padded at borders.
        let mut other_lens = [0.0f64; 4];
        let mut n_lens = 0;
        for (slot, &f) in mesh.edge_face_ids(e).iter().enumerate() {
            let face = mesh.faces()[f];
            let opp = face
                .into_iter()
                .find(|&v| v != a && v != b)
                .expect("triangle has a vertex off each edge");
            row[6 + 3 * slot..9 + 3 * slot].copy_from_slice(&mesh.vertices[opp]);
            let mut others: Vec<usize> = mesh
                .face_edges(f)
                .iter()
                .map(|&(eid, _)| eid)
                .filter(|&eid| eid != e)
                .collect();
            others.sort_unstable();
            for eid in others {
                let (u, v) = mesh.edges()[eid];
                other_lens[n_lens] = vec3::norm(vec3::sub(mesh.vertices[v], mesh.vertices[u]));
                n_lens += 1;
            }
        }

        let mean_normal = vec3::scale(vec3::add(vertex_normals[a], vertex_normals[b]), 0.5);
        match vec3::normalize(mean_normal, EPS) {
            Some(n) => row[12..15].copy_from_slice(&n),
            None => diagnostics.push(format!(
                "edge {e} has opposing endpoint normals; edge normal set to zero"
            )),
        }
        row[15] = own_len;
        row[16..20].copy_from_slice(&other_lens);
    }
    Ok(x)
}

fn face_features(mesh: &Mesh, geo: &FaceGeometry) -> FeatureMatrix {
    let mut x = FeatureMatrix::zeros(mesh.n_faces(), 13);
    for (f, face) in mesh.faces().iter().enumerate() {
        let row = x.row_mut(f);
        for (k, &v) in face.iter().enumerate() {
            row[3 * k..3 * k + 3].copy_from_slice(&mesh.vertices[v]);
        }
        row[9..12].copy_from_slice(&geo.normal[f]);
        row[12] = geo.area[f];
    }
    x
}

/// Uniform random rotation (Shoemake's quaternion method) applied about the
/// origin.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let u1: f64 = rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    let u3: f64 = rng.random::<f64>();
    let two_pi = 2.0 * std::f64::consts::PI;
    let (x, y) = (
        (1.0 - u1).sqrt() * (two_pi * u2).sin(),
        (1.0 - u1).sqrt() * (two_pi * u2).cos(),
    );
    let (z, w) = (
        u1.sqrt() * (two_pi * u3).sin(),
        u1.sqrt() * (two_pi * u3).cos(),
    );
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

pub fn rotate_mesh(mesh: &Mesh, rot: &[[f64; 3]; 3]) -> Mesh {
    let mut out = mesh.clone();
    for v in &mut out.vertices {
        let p = *v;
        for (c, row) in rot.iter().enumerate() {
            v[c] = vec3::dot(*row, p);
        }
    }
    out
}

pub const DEFAULT_JITTER_MAX: f64 = 0.1;

/// Train-time augmentation: a uniform random rotation followed by an
/// edge-directed jitter that moves each vertex toward one uniformly chosen
/// neighbor by a factor `u ~ U(0, jitter_max)`. Vertices without neighbors
/// are left in place.
pub fn augment_with(mesh: &Mesh, seed: u64, jitter_max: f64) -> Mesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = random_rotation(&mut rng);
    let mut out = rotate_mesh(mesh, &rot);
    let adj = AdjacencyStructures::build(mesh);
    for v in 0..out.n_vertices() {
        let nbrs = &adj.vertex_adj[v];
        if nbrs.is_empty() {
            continue;
        }
        let w = nbrs[rng.random_range(0..nbrs.len())];
        let u: f64 = rng.random_range(0.0..jitter_max);
        let towards = vec3::sub(out.vertices[w], out.vertices[v]);
        out.vertices[v] = vec3::add(out.vertices[v], vec3::scale(towards, u));
    }
    out
}

pub fn augment(mesh: &Mesh, seed: u64) -> Mesh {
    augment_with(mesh, seed, DEFAULT_JITTER_MAX)
}
