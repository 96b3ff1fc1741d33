//! Evaluation: accuracy metrics, prediction, and label transfer onto
//! mutated meshes.
//!
//! Classification reports mesh-level accuracy (one prediction per mesh);
//! segmentation reports face-weighted accuracy (fraction of all faces
//! labeled correctly, meshes pooled). The evaluation loss is cross-entropy
//! with the configured label smoothing but without class weighting, so it
//! is comparable across differently weighted training runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Scalar, Tape};
use crate::mesh::Mesh;
use crate::model::data::PreparedSample;
use crate::model::{argmax_rows, build_patterns, mix_seed, Model, TaskKind};
use crate::par;

#[derive(Debug, Clone, Serialize)]
pub struct SampleEval {
    pub index: usize,
    pub source: String,
    pub correct: usize,
    pub total: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub mean_loss: f64,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_sample: Vec<SampleEval>,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub num_samples: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub correct: usize,
    pub total: usize,
    pub per_sample: Vec<SampleEval>,
}

/// Predictions and evaluation loss for one sample under a fixed pattern
/// seed. Dropout is off; the pass is deterministic in (model, sample, seed).
pub fn predict_with<T: Scalar>(
    model: &Model<T>,
    sample: &PreparedSample,
    pattern_seed: u64,
) -> (Vec<usize>, f64) {
    let patterns = build_patterns(&sample.adj, pattern_seed);
    let mut tape = Tape::new();
    let b = model.store.bind(&mut tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(pattern_seed);
    let logits = model.forward(
        &mut tape,
        &b,
        sample,
        &sample.base_features,
        &patterns,
        false,
        &mut rng,
    );
    let targets = model.targets(sample);
    let plain = vec![1.0; model.config.num_classes];
    let loss = tape.cross_entropy(logits, &targets, &plain, model.config.label_smoothing);
    let preds = argmax_rows(tape.values(logits), logits.rows, logits.cols);
    (preds, tape.values(loss)[0].to_f64())
}

pub fn predict<T: Scalar>(
    model: &Model<T>,
    sample: &PreparedSample,
    seed: u64,
) -> Vec<usize> {
    predict_with(model, sample, mix_seed(seed, 0)).0
}

/// Evaluates prepared samples; pattern seeds derive from `seed` and the
/// sample index, so results are deterministic and independent of worker
/// count.
pub fn evaluate_prepared<T: Scalar>(
    model: &Model<T>,
    samples: &[PreparedSample],
    seed: u64,
    workers: usize,
) -> EvalSummary {
    let rows: Vec<SampleEval> = par::map_indexed(workers, samples, |i, s| {
        let (preds, loss) = predict_with(model, s, mix_seed(seed, i as u64));
        let targets = model.targets(s);
        let correct = preds.iter().zip(&targets).filter(|(p, t)| p == t).count();
        SampleEval {
            index: i,
            source: s.source.clone(),
            correct,
            total: targets.len(),
            loss,
        }
    });
    let correct: usize = rows.iter().map(|r| r.correct).sum();
    let total: usize = rows.iter().map(|r| r.total).sum();
    let mean_loss = rows.iter().map(|r| r.loss).sum::<f64>() / rows.len().max(1) as f64;
    EvalSummary {
        mean_loss,
        accuracy: correct as f64 / total.max(1) as f64,
        correct,
        total,
        per_sample: rows,
    }
}

pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    samples: &[PreparedSample],
    seed: u64,
    workers: usize,
) -> EvalReport {
    let s = evaluate_prepared(model, samples, seed, workers);
    EvalReport {
        task: model.config.task,
        num_samples: samples.len(),
        accuracy: s.accuracy,
        mean_loss: s.mean_loss,
        correct: s.correct,
        total: s.total,
        per_sample: s.per_sample,
    }
}

fn face_centroid(mesh: &Mesh, f: usize) -> [f64; 3] {
    let face = mesh.faces()[f];
    let mut c = [0.0; 3];
    for &v in &face {
        for a in 0..3 {
            c[a] += mesh.vertices[v][a] / 3.0;
        }
    }
    c
}

/// Transfers per-face labels from an original mesh to a mutated one: each
/// mutated face takes the label of the nearest original face centroid.
/// Ground truth for evaluating on mutated geometry.
pub fn map_face_labels(original: &Mesh, labels: &[usize], mutated: &Mesh) -> Vec<usize> {
    assert_eq!(labels.len(), original.n_faces(), "one label per original face");
    let originals: Vec<[f64; 3]> = (0..original.n_faces())
        .map(|f| face_centroid(original, f))
        .collect();
    (0..mutated.n_faces())
        .map(|f| {
            let c = face_centroid(mutated, f);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (g, o) in originals.iter().enumerate() {
                let d = (0..3).map(|a| (c[a] - o[a]) * (c[a] - o[a])).sum::<f64>();
                if d < best_d {
                    best_d = d;
                    best = g;
                }
            }
            labels[best]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::generate::{self, ShapeKind};
    use crate::mesh::mutate::{self, Mutation};
    use crate::model::config::{LayerConfig, LayerKind, ModelConfig};
    use crate::model::data::{self, octant_face_labels, SampleLabel};
    use crate::nn::Element;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d: 16,
            heads: 2,
            d_hidden: 24,
            elements: vec![Element::Vertex, Element::Edge],
            layers: vec![LayerConfig {
                kind: LayerKind::Hodge,
                updates: vec![Element::Vertex],
            }],
            num_classes: 3,
            dropout: 0.0,
            augment: false,
            ..ModelConfig::default()
        }
    }

    fn meshes(n: usize) -> Vec<Mesh> {
        (0..n)
            .map(|i| {
                let kind = ShapeKind::ALL[i % 3];
                generate::generate(kind, data::class_resolution(kind, 1), i as u64, 0.08)
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn labels_equal_to_predictions_score_perfect_accuracy() {
        let cfg = tiny_config();
        let model = Model::<f32>::new(cfg.clone()).unwrap();
        let samples: Vec<PreparedSample> = meshes(4)
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                // First pass with a placeholder label to get predictions.
                let probe =
                    PreparedSample::new(m.clone(), SampleLabel::Class(0), &cfg, format!("{i}"))
                        .unwrap();
                let pred = predict_with(&model, &probe, mix_seed(7, i as u64)).0[0];
                PreparedSample::new(m, SampleLabel::Class(pred), &cfg, format!("{i}")).unwrap()
            })
            .collect();
        let report = evaluate(&model, &samples, 7, 1);
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.correct, 4);
        assert_eq!(report.total, 4);
    }

    #[test]
    fn random_labels_score_near_chance() {
        // Binomial oracle for the accuracy metric: fixed predictions vs
        // uniformly random labels must land within 3 sigma of 1/C.
        let cfg = tiny_config();
        let model = Model::<f32>::new(cfg.clone()).unwrap();
        let base = meshes(10);
        let preds: Vec<usize> = base
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let s = PreparedSample::new(m.clone(), SampleLabel::Class(0), &cfg, "p".into())
                    .unwrap();
                predict_with(&model, &s, mix_seed(3, i as u64)).0[0]
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let trials = 500usize;
        let mut hits = 0usize;
        for _ in 0..trials / base.len() {
            for p in &preds {
                if rng.random_range(0..3) == *p {
                    hits += 1;
                }
            }
        }
        let n = trials as f64;
        let (p, q) = (1.0 / 3.0, 2.0 / 3.0);
        let sigma = (n * p * q).sqrt();
        assert!(
            ((hits as f64) - n * p).abs() <= 3.0 * sigma,
            "hits {hits} outside 3 sigma of {}",
            n * p
        );
    }

    #[test]
    fn segmentation_accuracy_is_face_weighted() {
        let cfg = ModelConfig {
            task: TaskKind::Segmentation,
            num_classes: 8,
            pool_element: Element::Vertex,
            ..tiny_config()
        };
        let model = Model::<f32>::new(cfg.clone()).unwrap();
        let m = generate::generate(ShapeKind::Sphere, 2, 0, 0.0).unwrap();
        let labels = octant_face_labels(&m);
        let n_f = m.n_faces();
        let s = PreparedSample::new(m, SampleLabel::Faces(labels), &cfg, "s".into()).unwrap();
        let report = evaluate(&model, &[s], 0, 1);
        assert_eq!(report.total, n_f, "denominator counts faces");
        assert!(report.accuracy >= 0.0 && report.accuracy <= 1.0);
    }

    #[test]
    fn face_label_transfer_is_identity_on_unchanged_geometry() {
        let m = generate::generate(ShapeKind::Cube, 3, 0, 0.0).unwrap();
        let labels = octant_face_labels(&m);
        assert_eq!(map_face_labels(&m, &labels, &m), labels);
    }

    #[test]
    fn face_label_transfer_survives_face_removal() {
        let m = generate::generate(ShapeKind::Sphere, 2, 0, 0.0).unwrap();
        let labels = octant_face_labels(&m);
        let (mutated, record) =
            mutate::apply(&m, &Mutation::FaceRemoval { p: 0.1 }, 5).unwrap();
        let mapped = map_face_labels(&m, &labels, &mutated);
        // Vertices are untouched, so each surviving face's centroid matches
        // its own original exactly and must keep its label.
        let removed: std::collections::HashSet<usize> =
            record.removed_face_ids.iter().copied().collect();
        let survivors: Vec<usize> = (0..m.n_faces()).filter(|f| !removed.contains(f)).collect();
        assert_eq!(mapped.len(), survivors.len());
        for (new_f, &old_f) in survivors.iter().enumerate() {
            assert_eq!(mapped[new_f], labels[old_f], "face {old_f}");
        }
    }
}
