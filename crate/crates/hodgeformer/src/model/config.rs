//! Model and training hyperparameters.
//!
//! A config deserializes from JSON with unknown keys rejected and every
//! field optional (missing fields take the defaults below). `validate`
//! enforces the structural rules the builder assumes, reporting the
//! offending key path.

use serde::{Deserialize, Serialize};

use crate::nn::Element;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Segmentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Hodge,
    Vanilla,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub kind: LayerKind,
    /// Element kinds this layer updates; others pass through.
    pub updates: Vec<Element>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Common latent dimension of every element stream.
    pub d: usize,
    pub heads: usize,
    /// Hidden width of the residual MLPs, the input embeddings and the task
    /// head.
    pub d_hidden: usize,
    /// Element streams the model carries.
    pub elements: Vec<Element>,
    pub layers: Vec<LayerConfig>,
    pub task: TaskKind,
    pub num_classes: usize,
    /// Stream mean-pooled for mesh-level logits (classification only).
    pub pool_element: Element,
    pub label_smoothing: f64,
    /// Weight classes by inverse training frequency (normalized to mean 1).
    pub class_weighting: bool,
    pub dropout: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Random rotation + vertex jitter on training meshes, fresh per epoch.
    pub augment: bool,
    /// Rebuild attention sparsity patterns with a fresh seed every training
    /// epoch (stochastic regularization); evaluation patterns stay fixed.
    pub resample_patterns: bool,
    /// Stop once training accuracy reaches this threshold.
    pub early_stop_train_acc: Option<f64>,
}

/// The stacked layout used by the desk-scale experiments: six Hodge
/// attention layers followed by two vanilla transformer layers, all
/// updating the vertex stream.
pub fn default_layers() -> Vec<LayerConfig> {
    let mut layers = Vec::with_capacity(8);
    for _ in 0..6 {
        layers.push(LayerConfig {
            kind: LayerKind::Hodge,
            updates: vec![Element::Vertex],
        });
    }
    for _ in 0..2 {
        layers.push(LayerConfig {
            kind: LayerKind::Vanilla,
            updates: vec![Element::Vertex],
        });
    }
    layers
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            d: 256,
            heads: 4,
            d_hidden: 512,
            elements: vec![Element::Vertex, Element::Edge],
            layers: default_layers(),
            task: TaskKind::Classification,
            num_classes: 3,
            pool_element: Element::Vertex,
            label_smoothing: 0.2,
            class_weighting: true,
            dropout: 0.1,
            lr_max: 5e-4,
            lr_min: 1e-6,
            epochs: 200,
            batch_size: 8,
            seed: 0,
            precision: Precision::F32,
            augment: true,
            resample_patterns: true,
            early_stop_train_acc: None,
        }
    }
}

/// Star sources a Hodge layer needs to update `kind`: the Laplacian chain
/// for an element reads the streams its star roles attend over.
pub fn hodge_sources(kind: Element) -> &'static [Element] {
    match kind {
        Element::Vertex => &[Element::Vertex, Element::Edge],
        Element::Edge => &[Element::Vertex, Element::Edge, Element::Face],
        Element::Face => &[Element::Edge, Element::Face],
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: String| Err(Error::Config(format!("{key}: {msg}")));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return fail("d", format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.d_hidden == 0 {
            return fail("d_hidden", "must be positive".into());
        }
        if self.elements.is_empty() {
            return fail("elements", "at least one element stream is required".into());
        }
        for (i, k) in self.elements.iter().enumerate() {
            if self.elements[..i].contains(k) {
                return fail("elements", format!("duplicate element {k}"));
            }
        }
        if self.layers.is_empty() {
            return fail("layers", "at least one layer is required".into());
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.updates.is_empty() {
                return fail(&format!("layers[{i}].updates"), "must be nonempty".into());
            }
            for k in &layer.updates {
                if !self.elements.contains(k) {
                    return fail(
                        &format!("layers[{i}].updates"),
                        format!("updates element {k} not in elements"),
                    );
                }
                if layer.kind == LayerKind::Hodge {
                    for src in hodge_sources(*k) {
                        if !self.elements.contains(src) {
                            return fail(
                                &format!("layers[{i}].updates"),
                                format!("updating {k} needs the {src} stream in elements"),
                            );
                        }
                    }
                }
            }
        }
        if self.num_classes < 2 {
            return fail("num_classes", "need at least two classes".into());
        }
        match self.task {
            TaskKind::Classification => {
                if !self.elements.contains(&self.pool_element) {
                    return fail(
                        "pool_element",
                        format!("{} not in elements", self.pool_element),
                    );
                }
            }
            TaskKind::Segmentation => {
                if !self.elements.contains(&Element::Face)
                    && !self.elements.contains(&Element::Vertex)
                {
                    return fail(
                        "elements",
                        "segmentation needs a face stream or a vertex stream to pool faces from"
                            .into(),
                    );
                }
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("label_smoothing", format!("{} outside [0,1)", self.label_smoothing));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout", format!("{} outside [0,1)", self.dropout));
        }
        if !(self.lr_max > 0.0) || !self.lr_max.is_finite() {
            return fail("lr_max", format!("{} must be positive and finite", self.lr_max));
        }
        if !(0.0..=self.lr_max).contains(&self.lr_min) {
            return fail("lr_min", format!("{} outside [0, lr_max]", self.lr_min));
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1".into());
        }
        if let Some(t) = self.early_stop_train_acc {
            if !(0.0..=1.0).contains(&t) {
                return fail("early_stop_train_acc", format!("{t} outside [0,1]"));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<ModelConfig> {
        let config: ModelConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
