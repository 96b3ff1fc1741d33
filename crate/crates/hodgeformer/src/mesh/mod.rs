//! Triangle mesh storage and the combinatorial structure derived from it.
//!
//! A [`Mesh`] owns vertex positions and triangle faces. Everything else —
//! canonical edges, per-face edge orientations, incidence operators,
//! adjacency — is derived deterministically at construction time so the rest
//! of the crate can rely on it being consistent.

pub mod adjacency;
pub mod generate;
pub mod incidence;
pub mod io;
pub mod mutate;

use crate::error::{Error, Result};
use crate::vec3::{self, Vec3};

/// A manifold triangle mesh.
///
/// Invariants enforced at construction:
/// - every face references 3 distinct, in-range vertices,
/// - every edge is shared by one or two faces,
/// - edges are stored canonically as `(min, max)` pairs sorted
///   lexicographically, so edge ids are reproducible across runs.
///
/// Vertex positions are freely mutable (geometry does not affect the derived
/// combinatorics); connectivity is fixed once built.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    edges: Vec<(usize, usize)>,
    /// Per face: the edge id and orientation sign of each of its three sides.
    /// Side `k` runs from corner `k` to corner `(k + 1) % 3`; the sign is `+1`
    /// when that traversal goes from the lower vertex id to the higher one
    /// (i.e. agrees with the canonical edge direction) and `-1` otherwise.
    face_edges: Vec<[(usize, i8); 3]>,
    /// Per edge: the ids of the one or two faces containing it.
    edge_faces: Vec<Vec<usize>>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Mesh> {
        let n_v = vertices.len();
        if n_v == 0 {
            return Err(Error::InvalidMesh("mesh has no vertices".into()));
        }
        for (i, v) in vertices.iter().enumerate() {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidMesh(format!(
                    "vertex {i} has non-finite coordinates"
                )));
            }
        }
        for (f, face) in faces.iter().enumerate() {
            for &v in face {
                if v >= n_v {
                    return Err(Error::InvalidMesh(format!(
                        "face {f} references vertex {v} but the mesh has {n_v} vertices"
                    )));
                }
            }
            if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
                return Err(Error::InvalidMesh(format!(
                    "face {f} repeats a vertex: {face:?}"
                )));
            }
        }

        let mut edges: Vec<(usize, usize)> = faces
            .iter()
            .flat_map(|f| {
                (0..3).map(move |k| {
                    let (a, b) = (f[k], f[(k + 1) % 3]);
                    (a.min(b), a.max(b))
                })
            })
            .collect();
        edges.sort_unstable();
        edges.dedup();

        let edge_id = |a: usize, b: usize| -> usize {
            let key = (a.min(b), a.max(b));
            edges.binary_search(&key).expect("edge derived from a face")
        };

        let mut face_edges = Vec::with_capacity(faces.len());
        let mut edge_faces = vec![Vec::new(); edges.len()];
        for (f, face) in faces.iter().enumerate() {
            let mut sides = [(0usize, 0i8); 3];
            for k in 0..3 {
                let (a, b) = (face[k], face[(k + 1) % 3]);
                let e = edge_id(a, b);
                sides[k] = (e, if a < b { 1 } else { -1 });
                edge_faces[e].push(f);
            }
            face_edges.push(sides);
        }
        for (e, fs) in edge_faces.iter().enumerate() {
            if fs.len() > 2 {
                let (a, b) = edges[e];
                return Err(Error::InvalidMesh(format!(
                    "edge ({a}, {b}) is shared by {} faces; a manifold edge has at most 2",
                    fs.len()
                )));
            }
        }

        Ok(Mesh {
            vertices,
            faces,
            edges,
            face_edges,
            edge_faces,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Canonical `(min, max)` edges in lexicographic order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Edge id and orientation sign of each side of face `f`.
    pub fn face_edges(&self, f: usize) -> &[(usize, i8); 3] {
        &self.face_edges[f]
    }

    /// Ids of the one or two faces incident to edge `e`, ascending.
    pub fn edge_face_ids(&self, e: usize) -> &[usize] {
        &self.edge_faces[e]
    }

    pub fn edge_index(&self, a: usize, b: usize) -> Option<usize> {
        let key = (a.min(b), a.max(b));
        self.edges.binary_search(&key).ok()
    }

    pub fn boundary_edge_count(&self) -> usize {
        self.edge_faces.iter().filter(|fs| fs.len() == 1).count()
    }

    pub fn is_closed(&self) -> bool {
        self.boundary_edge_count() == 0
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.n_vertices() as i64 - self.n_edges() as i64 + self.n_faces() as i64
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for c in 0..3 {
                lo[c] = lo[c].min(v[c]);
                hi[c] = hi[c].max(v[c]);
            }
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        vec3::norm(vec3::sub(hi, lo))
    }

    /// Zero-centers the vertex centroid and scales the mesh into the unit
    /// sphere (max vertex norm becomes 1). Fails when all vertices coincide.
    pub fn normalized(&self) -> Result<Mesh> {
        let n = self.n_vertices() as f64;
        let mut centroid = [0.0; 3];
        for v in &self.vertices {
            centroid = vec3::add(centroid, *v);
        }
        centroid = vec3::scale(centroid, 1.0 / n);
        let mut out = self.clone();
        let mut max_norm: f64 = 0.0;
        for v in &mut out.vertices {
            *v = vec3::sub(*v, centroid);
            max_norm = max_norm.max(vec3::norm(*v));
        }
        if max_norm < 1e-12 {
            return Err(Error::DegenerateGeometry(
                "cannot normalize: all vertices coincide".into(),
            ));
        }
        let inv = 1.0 / max_norm;
        for v in &mut out.vertices {
            *v = vec3::scale(*v, inv);
        }
        Ok(out)
    }

    /// Re-checks the construction invariants. Mutated meshes are rebuilt
    /// through [`Mesh::new`], so this is mainly a test and debugging aid.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = Mesh::new(self.vertices.clone(), self.faces.clone())?;
        if rebuilt.edges != self.edges || rebuilt.face_edges != self.face_edges {
            return Err(Error::InvalidMesh(
                "derived edge structure is out of sync with the face list".into(),
            ));
        }
        Ok(())
    }
}
