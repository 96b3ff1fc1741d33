//! Dataset plumbing: manifests, sample preparation, synthetic data.
//!
//! A manifest is JSON-lines, one entry per mesh, each naming either a file
//! path (relative paths resolve against the manifest's directory) or a
//! generator spec, plus a label source and a split tag. Samples are fully
//! prepared up front — normalized geometry, incidence operators, adjacency,
//! aggregation matrices and base features — so the training loop touches no
//! I/O.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::features::{self, FeatureSet};
use crate::mesh::adjacency::AdjacencyStructures;
use crate::mesh::generate::{self, ShapeKind};
use crate::mesh::incidence::IncidenceOperators;
use crate::mesh::{io, Mesh};
use crate::model::config::{ModelConfig, TaskKind};
use crate::nn::{aggregation_matrix, face_vertex_pool, ArcOps, Element, PerElement};
use crate::autodiff::PoolingMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: ShapeKind,
    pub resolution: u32,
    pub seed: u64,
    #[serde(default)]
    pub deform: f64,
}

impl GeneratorSpec {
    pub fn build(&self) -> Result<Mesh> {
        generate::generate(self.kind, self.resolution, self.seed, self.deform)
    }
}

/// One dataset entry. Exactly one of `path`/`generator` must be set; labels
/// come from `label` (classification), `label_file` (one integer per line,
/// one line per face), or `label_rule` (procedural, e.g. "octant").
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_rule: Option<String>,
    pub split: Split,
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("read {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
            Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(Error::Dataset(format!("{}: empty manifest", path.display())));
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SampleLabel {
    Class(usize),
    Faces(Vec<usize>),
}

/// Everything the forward pass needs about one mesh, precomputed once. The
/// normalized mesh itself is kept for on-the-fly augmentation (augmentation
/// changes geometry only, so operators, adjacency and patterns are reused).
#[derive(Debug)]
pub struct PreparedSample {
    pub mesh: Mesh,
    pub ops: ArcOps,
    pub adj: AdjacencyStructures,
    pub agg: PerElement<Arc<PoolingMatrix>>,
    pub face_pool: Option<Arc<PoolingMatrix>>,
    pub base_features: FeatureSet,
    pub label: SampleLabel,
    pub source: String,
}

impl PreparedSample {
    pub fn new(
        mesh: Mesh,
        label: SampleLabel,
        config: &ModelConfig,
        source: String,
    ) -> Result<PreparedSample> {
        let mesh = mesh.normalized()?;
        match &label {
            SampleLabel::Class(c) => {
                if *c >= config.num_classes {
                    return Err(Error::Dataset(format!(
                        "{source}: class label {c} outside 0..{}",
                        config.num_classes
                    )));
                }
            }
            SampleLabel::Faces(per_face) => {
                if per_face.len() != mesh.n_faces() {
                    return Err(Error::Dataset(format!(
                        "{source}: {} face labels for {} faces",
                        per_face.len(),
                        mesh.n_faces()
                    )));
                }
                if let Some(bad) = per_face.iter().find(|&&c| c >= config.num_classes) {
                    return Err(Error::Dataset(format!(
                        "{source}: face label {bad} outside 0..{}",
                        config.num_classes
                    )));
                }
            }
        }
        let ops = ArcOps::new(&IncidenceOperators::build(&mesh));
        let adj = AdjacencyStructures::build(&mesh);
        let mut agg = PerElement::default();
        for &k in &config.elements {
            let a = match k {
                Element::Vertex => &adj.vertex_adj,
                Element::Edge => &adj.edge_adj,
                Element::Face => &adj.face_adj,
            };
            agg.set(k, Arc::new(aggregation_matrix(a)));
        }
        let face_pool = (config.task == TaskKind::Segmentation
            && !config.elements.contains(&Element::Face))
        .then(|| Arc::new(face_vertex_pool(mesh.faces(), mesh.n_vertices())));
        let base_features = features::extract(&mesh)?;
        Ok(PreparedSample {
            mesh,
            ops,
            adj,
            agg,
            face_pool,
            base_features,
            label: label.clone(),
            source,
        })
    }

    /// Features for one training epoch: jittered/rotated when augmenting,
    /// the precomputed base set otherwise. Extraction failures on an
    /// augmented mesh (degenerate jitter) fall back to the base features.
    pub fn epoch_features(&self, augment: bool, seed: u64) -> FeatureSet {
        if !augment {
            return self.base_features.clone();
        }
        let warped = features::augment(&self.mesh, seed);
        features::extract(&warped).unwrap_or_else(|_| self.base_features.clone())
    }
}

fn load_face_labels(path: &Path, source: &str) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("{source}: read {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<usize>()
                .map_err(|e| Error::Dataset(format!("{source}: bad face label {l:?}: {e}")))
        })
        .collect()
}

/// Face label = octant of the face centroid direction relative to the mesh
/// centroid (8 classes); the procedural labeling used by synthetic
/// segmentation data.
pub fn octant_face_labels(mesh: &Mesh) -> Vec<usize> {
    let n = mesh.n_vertices() as f64;
    let mut center = [0.0f64; 3];
    for v in &mesh.vertices {
        for a in 0..3 {
            center[a] += v[a] / n;
        }
    }
    mesh.faces()
        .iter()
        .map(|f| {
            let mut c = [0.0f64; 3];
            for &v in f {
                for a in 0..3 {
                    c[a] += mesh.vertices[v][a] / 3.0;
                }
            }
            (0..3).fold(0usize, |acc, a| {
                acc | (usize::from(c[a] - center[a] > 0.0) << a)
            })
        })
        .collect()
}

fn entry_mesh(entry: &ManifestEntry, base_dir: &Path, idx: usize) -> Result<(Mesh, String)> {
    match (&entry.path, &entry.generator) {
        (Some(p), None) => {
            let full = base_dir.join(p);
            Ok((io::load_mesh(&full)?, p.clone()))
        }
        (None, Some(g)) => Ok((g.build()?, format!("{}:{}", g.kind, g.seed))),
        _ => Err(Error::Dataset(format!(
            "manifest entry {idx}: exactly one of path/generator required"
        ))),
    }
}

fn entry_label(
    entry: &ManifestEntry,
    mesh: &Mesh,
    base_dir: &Path,
    config: &ModelConfig,
    source: &str,
) -> Result<SampleLabel> {
    match config.task {
        TaskKind::Classification => match entry.label {
            Some(c) => Ok(SampleLabel::Class(c)),
            None => Err(Error::Dataset(format!(
                "{source}: classification entry missing label"
            ))),
        },
        TaskKind::Segmentation => {
            if let Some(f) = &entry.label_file {
                return Ok(SampleLabel::Faces(load_face_labels(
                    &base_dir.join(f),
                    source,
                )?));
            }
            match entry.label_rule.as_deref() {
                Some("octant") => Ok(SampleLabel::Faces(octant_face_labels(mesh))),
                Some(other) => Err(Error::Dataset(format!(
                    "{source}: unknown label_rule {other:?}"
                ))),
                None => Err(Error::Dataset(format!(
                    "{source}: segmentation entry missing label_file or label_rule"
                ))),
            }
        }
    }
}

/// Prepared samples by split.
pub struct Dataset {
    pub train: Vec<PreparedSample>,
    pub val: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
}

/// Loads and prepares every manifest entry. When the manifest has train
/// entries but no val split, every fifth train sample (deterministically)
/// becomes validation.
pub fn load_dataset(manifest_path: &Path, config: &ModelConfig) -> Result<Dataset> {
    let entries = load_manifest(manifest_path)?;
    let base_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut dataset = Dataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, entry) in entries.iter().enumerate() {
        let (mesh, source) = entry_mesh(entry, base_dir, i)?;
        let label = entry_label(entry, &mesh, base_dir, config, &source)?;
        let sample = PreparedSample::new(mesh, label, config, source)?;
        match entry.split {
            Split::Train => dataset.train.push(sample),
            Split::Val => dataset.val.push(sample),
            Split::Test => dataset.test.push(sample),
        }
    }
    if dataset.val.is_empty() && dataset.train.len() >= 5 {
        let mut kept = Vec::new();
        for (i, s) in dataset.train.drain(..).enumerate() {
            if i % 5 == 4 {
                dataset.val.push(s);
            } else {
                kept.push(s);
            }
        }
        dataset.train = kept;
    }
    Ok(dataset)
}

/// Per-class loss weights: inverse training frequency normalized to mean 1
/// when enabled, all ones otherwise. Unobserved classes weigh 1.
pub fn class_weights(samples: &[PreparedSample], num_classes: usize, enabled: bool) -> Vec<f64> {
    if !enabled {
        return vec![1.0; num_classes];
    }
    let mut counts = vec![0usize; num_classes];
    for s in samples {
        match &s.label {
            SampleLabel::Class(c) => counts[*c] += 1,
            SampleLabel::Faces(fs) => {
                for &c in fs {
                    counts[c] += 1;
                }
            }
        }
    }
    let inv: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { 1.0 } else { 1.0 / c as f64 })
        .collect();
    let mean = inv.iter().sum::<f64>() / num_classes as f64;
    inv.iter().map(|w| w / mean).collect()
}

/// Default generator resolution giving the shape classes comparable element
/// counts at `scale` (sphere grows 4x per subdivision, the others
/// quadratically). At scale 1 every kind sits just above the generator's
/// minimum vertex count.
pub fn class_resolution(kind: ShapeKind, scale: u32) -> u32 {
    match kind {
        ShapeKind::Sphere => scale + 1,
        ShapeKind::Cube | ShapeKind::Torus => 3 * scale,
        ShapeKind::Cylinder => 5 * scale,
    }
}

/// Synthetic classification meshes: `per_class` deformed instances of each
/// of the first `classes` shape kinds, labeled by kind index.
pub fn synthetic_class_meshes(
    classes: usize,
    per_class: usize,
    scale: u32,
    deform: f64,
    seed: u64,
) -> Result<Vec<(Mesh, usize)>> {
    if classes == 0 || classes > ShapeKind::ALL.len() {
        return Err(Error::Config(format!(
            "classes must be 1..={}, got {classes}",
            ShapeKind::ALL.len()
        )));
    }
    let mut out = Vec::with_capacity(classes * per_class);
    for (c, &kind) in ShapeKind::ALL.iter().take(classes).enumerate() {
        for i in 0..per_class {
            let mesh_seed = seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add((c * per_class + i) as u64);
            let mesh = generate::generate(kind, class_resolution(kind, scale), mesh_seed, deform)?;
            out.push((mesh, c));
        }
    }
    Ok(out)
}

/// Writes a synthetic dataset to disk: OFF files plus `manifest.jsonl`.
/// Segmentation datasets also get per-face octant label files. Returns the
/// manifest path.
#[allow(clippy::too_many_arguments)]
pub fn write_synthetic_dataset(
    dir: &Path,
    task: TaskKind,
    classes: usize,
    per_class: usize,
    scale: u32,
    deform: f64,
    seed: u64,
    split: Split,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let meshes = synthetic_class_meshes(classes, per_class, scale, deform, seed)?;
    let mut entries = Vec::with_capacity(meshes.len());
    for (i, (mesh, class)) in meshes.iter().enumerate() {
        let kind = ShapeKind::ALL[*class];
        let name = format!("{kind}_{i:03}.off");
        io::write_off(mesh, &dir.join(&name))?;
        let mut entry = ManifestEntry {
            path: Some(name.clone()),
            generator: None,
            label: None,
            label_file: None,
            label_rule: None,
            split,
        };
        match task {
            TaskKind::Classification => entry.label = Some(*class),
            TaskKind::Segmentation => {
                let labels = octant_face_labels(mesh);
                let label_name = format!("{kind}_{i:03}.labels");
                let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
                fs::write(dir.join(&label_name), text)?;
                entry.label_file = Some(label_name);
            }
        }
        entries.push(entry);
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
