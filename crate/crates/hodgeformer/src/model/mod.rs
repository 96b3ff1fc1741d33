//! End-to-end model: input embeddings, a stack of Hodge/vanilla layers, and
//! a task head, with training, evaluation and checkpointing around it.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod train;

pub use config::{LayerConfig, LayerKind, ModelConfig, Precision, TaskKind};
pub use data::{Dataset, ManifestEntry, PreparedSample, SampleLabel, Split};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::features::{FeatureSet, EDGE_COLUMNS, FACE_COLUMNS, VERTEX_COLUMNS};
use crate::mesh::adjacency::AdjacencyStructures;
use crate::nn::{
    classification_head, hodgeformer_layer, neighbor_embedding, segmentation_head, vanilla_layer,
    Bound, Element, ElementPatterns, HodgeLayerParams, LayerCtx, MeshState, MlpParams, ParamStore,
    PerElement, VanillaLayerParams,
};
use crate::sparsity;
use crate::Result;

use std::sync::Arc;

/// SplitMix64 step; used to derive independent stream seeds from one root
/// seed plus salts (epoch, sample index, role tags) without correlation.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// One sparsity pattern per element kind, sized √n with the 4:1 local:random
/// mix, independently seeded per kind.
pub fn build_patterns(adj: &AdjacencyStructures, seed: u64) -> ElementPatterns {
    ElementPatterns {
        v: Arc::new(sparsity::build_pattern(&adj.vertex_adj, None, mix_seed(seed, 0))),
        e: Arc::new(sparsity::build_pattern(&adj.edge_adj, None, mix_seed(seed, 1))),
        f: Arc::new(sparsity::build_pattern(&adj.face_adj, None, mix_seed(seed, 2))),
    }
}

pub fn raw_feature_dim(k: Element) -> usize {
    match k {
        Element::Vertex => VERTEX_COLUMNS.len(),
        Element::Edge => EDGE_COLUMNS.len(),
        Element::Face => FACE_COLUMNS.len(),
    }
}

#[derive(Debug, Clone)]
pub enum LayerParams {
    Hodge(HodgeLayerParams),
    Vanilla(VanillaLayerParams),
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub embed: PerElement<MlpParams>,
    pub layers: Vec<LayerParams>,
    pub head: MlpParams,
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes a model from a validated config. Registration
    /// order (embeddings, layers, head) is part of the checkpoint contract.
    pub fn new(config: ModelConfig) -> Result<Model<T>> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let mut embed = PerElement::default();
        for k in Element::ALL {
            if config.elements.contains(&k) {
                embed.set(
                    k,
                    MlpParams::register(
                        &mut store,
                        &format!("embed.{}", k.key()),
                        raw_feature_dim(k),
                        config.d_hidden,
                        config.d,
                        false,
                        &mut rng,
                    ),
                );
            }
        }

        let mut layers = Vec::with_capacity(config.layers.len());
        for (i, lc) in config.layers.iter().enumerate() {
            let prefix = format!("layer{i}");
            let layer = match lc.kind {
                LayerKind::Hodge => LayerParams::Hodge(HodgeLayerParams::register(
                    &mut store,
                    &prefix,
                    config.d,
                    config.heads,
                    config.d_hidden,
                    &lc.updates,
                    &mut rng,
                )),
                LayerKind::Vanilla => LayerParams::Vanilla(VanillaLayerParams::register(
                    &mut store,
                    &prefix,
                    config.d,
                    config.heads,
                    config.d_hidden,
                    &lc.updates,
                    &mut rng,
                )),
            };
            layers.push(layer);
        }

        let head = MlpParams::register(
            &mut store,
            "head",
            config.d,
            config.d_hidden,
            config.num_classes,
            false,
            &mut rng,
        );

        Ok(Model {
            config,
            store,
            embed,
            layers,
            head,
        })
    }

    /// Full forward pass to logits: classification gives one row, face
    /// segmentation one row per face. `features` may be an augmented set;
    /// topology-derived inputs come from the prepared sample.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        sample: &PreparedSample,
        features: &FeatureSet,
        patterns: &ElementPatterns,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Tensor {
        let mut state = MeshState {
            x_v: None,
            x_e: None,
            x_f: None,
        };
        for k in Element::ALL {
            if !self.config.elements.contains(&k) {
                continue;
            }
            let fm = match k {
                Element::Vertex => &features.x_v,
                Element::Edge => &features.x_e,
                Element::Face => &features.x_f,
            };
            let x_raw = tape.leaf_from_f64(fm.rows, fm.cols, &fm.data, false);
            let x = neighbor_embedding(tape, x_raw, sample.agg.require(k), self.embed.require(k), b, rng);
            state.set(k, x);
        }

        let ctx = LayerCtx {
            ops: &sample.ops,
            patterns,
            dropout_p: self.config.dropout,
            train,
        };
        for layer in &self.layers {
            state = match layer {
                LayerParams::Hodge(p) => hodgeformer_layer(tape, state, p, b, &ctx, rng),
                LayerParams::Vanilla(p) => vanilla_layer(tape, state, p, b, &ctx, rng),
            };
        }

        match self.config.task {
            TaskKind::Classification => {
                let pooled = state.require(self.config.pool_element);
                classification_head(tape, pooled, &self.head, b, rng)
            }
            TaskKind::Segmentation => {
                let x_f = match state.x_f {
                    Some(x) => x,
                    None => {
                        let pool = sample.face_pool.as_ref().expect("face pooling prepared");
                        tape.row_mix(state.require(Element::Vertex), pool)
                    }
                };
                segmentation_head(tape, x_f, &self.head, b, rng)
            }
        }
    }

    /// Target class ids for the loss, in logit-row order.
    pub fn targets(&self, sample: &PreparedSample) -> Vec<usize> {
        match &sample.label {
            SampleLabel::Class(c) => vec![*c],
            SampleLabel::Faces(fs) => fs.clone(),
        }
    }
}

/// Row-wise argmax over a logits value buffer. Ties break toward the lower
/// index so predictions are deterministic regardless of summation order.
pub fn argmax_rows<T: Scalar>(values: &[T], rows: usize, cols: usize) -> Vec<usize> {
    (0..rows)
        .map(|r| {
            let row = &values[r * cols..(r + 1) * cols];
            let mut best = 0;
            for (i, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
