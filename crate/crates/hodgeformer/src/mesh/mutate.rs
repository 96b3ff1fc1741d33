//! Structured mesh corruptions for robustness evaluation.
//!
//! Every mutation is a pure function of `(mesh, parameters, seed)` and
//! returns both the mutated mesh and a sidecar record describing exactly
//! what happened. Face-removing mutations keep the original vertex array
//! (so per-vertex data stays aligned) and re-derive edges from the surviving
//! faces.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::adjacency::AdjacencyStructures;
use crate::mesh::Mesh;

pub const DEFAULT_PATCH_SEED_P: f64 = 0.005;
pub const DEFAULT_PATCH_K_MIN: usize = 8;
pub const DEFAULT_PATCH_K_MAX: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mutation {
    /// Per-coordinate Gaussian displacement with standard deviation
    /// `lambda * bounding_box_diagonal`.
    GaussianNoise { lambda: f64 },
    /// Removes each face independently with probability `p`.
    FaceRemoval { p: f64 },
    /// Seeds each face with probability `p`, then removes a BFS patch of
    /// `k ~ U(k_min..=k_max)` faces around every seed.
    PatchRemoval { p: f64, k_min: usize, k_max: usize },
}

impl Mutation {
    pub fn patch_removal_default(p: f64) -> Mutation {
        Mutation::PatchRemoval {
            p,
            k_min: DEFAULT_PATCH_K_MIN,
            k_max: DEFAULT_PATCH_K_MAX,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Mutation::GaussianNoise { .. } => "gaussian_noise",
            Mutation::FaceRemoval { .. } => "face_removal",
            Mutation::PatchRemoval { .. } => "patch_removal",
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Mutation::GaussianNoise { lambda } => {
                if !(0.0..=0.05).contains(&lambda) {
                    return Err(Error::Config(format!(
                        "gaussian_noise lambda must be in [0, 0.05], got {lambda}"
                    )));
                }
            }
            Mutation::FaceRemoval { p } | Mutation::PatchRemoval { p, .. } => {
                if !(0.0..=0.25).contains(&p) {
                    return Err(Error::Config(format!(
                        "{} p must be in [0, 0.25], got {p}",
                        self.kind_name()
                    )));
                }
                if let Mutation::PatchRemoval { k_min, k_max, .. } = *self {
                    if k_min == 0 || k_min > k_max {
                        return Err(Error::Config(format!(
                            "patch_removal needs 1 <= k_min <= k_max, got {k_min}..={k_max}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn parameters_json(&self) -> serde_json::Value {
        match *self {
            Mutation::GaussianNoise { lambda } => serde_json::json!({ "lambda": lambda }),
            Mutation::FaceRemoval { p } => serde_json::json!({ "p": p }),
            Mutation::PatchRemoval { p, k_min, k_max } => {
                serde_json::json!({ "p": p, "k_min": k_min, "k_max": k_max })
            }
        }
    }
}

/// Sidecar describing a mutation, written next to mutated meshes so results
/// can be reproduced and labels re-aligned.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MutationRecord {
    pub seed: u64,
    pub kind: String,
    pub parameters: serde_json::Value,
    pub removed_face_ids: Vec<usize>,
}

pub fn apply(mesh: &Mesh, mutation: &Mutation, seed: u64) -> Result<(Mesh, MutationRecord)> {
    mutation.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let removed: Vec<usize> = match *mutation {
        Mutation::GaussianNoise { lambda } => {
            let sigma = lambda * mesh.bbox_diagonal();
            let mut out = mesh.clone();
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).expect("finite sigma");
                for v in &mut out.vertices {
                    for c in v.iter_mut() {
                        *c += normal.sample(&mut rng);
                    }
                }
            }
            let record = MutationRecord {
                seed,
                kind: mutation.kind_name().into(),
                parameters: mutation.parameters_json(),
                removed_face_ids: Vec::new(),
            };
            return Ok((out, record));
        }
        Mutation::FaceRemoval { p } => (0..mesh.n_faces())
            .filter(|_| rng.random::<f64>() < p)
            .collect(),
        Mutation::PatchRemoval { p, k_min, k_max } => {
            let seeds: Vec<usize> = (0..mesh.n_faces())
                .filter(|_| rng.random::<f64>() < p)
                .collect();
            let adj = AdjacencyStructures::build(mesh);
            let mut removed = vec![false; mesh.n_faces()];
            for s in seeds {
                let k = rng.random_range(k_min..=k_max);
                for f in bfs_patch(&adj.face_adj, s, k) {
                    removed[f] = true;
                }
            }
            removed
                .iter()
                .enumerate()
                .filter_map(|(f, &r)| r.then_some(f))
                .collect()
        }
    };

    let removed_set: Vec<bool> = {
        let mut mask = vec![false; mesh.n_faces()];
        for &f in &removed {
            mask[f] = true;
        }
        mask
    };
    let kept: Vec<[usize; 3]> = mesh
        .faces()
        .iter()
        .enumerate()
        .filter_map(|(f, face)| (!removed_set[f]).then_some(*face))
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let out = Mesh::new(mesh.vertices.clone(), kept)?;
    let record = MutationRecord {
        seed,
        kind: mutation.kind_name().into(),
        parameters: mutation.parameters_json(),
        removed_face_ids: removed,
    };
    Ok((out, record))
}

/// First `k` faces reached by BFS from `start` (FIFO, neighbors in ascending
/// id order), including `start` itself.
fn bfs_patch(face_adj: &[Vec<usize>], start: usize, k: usize) -> Vec<usize> {
    let mut visited = vec![false; face_adj.len()];
    let mut queue = std::collections::VecDeque::new();
    let mut patch = Vec::with_capacity(k);
    visited[start] = true;
    queue.push_back(start);
    while let Some(f) = queue.pop_front() {
        patch.push(f);
        if patch.len() == k {
            break;
        }
        for &g in &face_adj[f] {
            if !visited[g] {
                visited[g] = true;
                queue.push_back(g);
            }
        }
    }
    patch
}
