//! Multi-modal entity encoder: per-modal encoders and the fusion layer.
//!
//! * graph: a learned entity table per KG, followed by `graph_layers` rounds of
//!   mean aggregation over the entity and its undirected neighbors, each with an
//!   affine map and `tanh`;
//! * attribute: multi-hot attribute vector times a per-KG projection;
//! * image: one affine projection of the fixed image feature, shared by both KGs;
//! * fusion: one affine map from the concatenated sub-embeddings to the joint
//!   embedding.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Csr, Graph, Matrix, Var};
use crate::error::{GeeaError, Result};
use crate::kgdata::{KnowledgeGraph, Side};
use crate::params::{xavier_uniform, Linear, ParamId, ParamStore};

/// Feature modality of a sub-embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modal {
    Graph,
    Attr,
    Image,
}

impl Modal {
    pub const ALL: [Modal; 3] = [Modal::Graph, Modal::Attr, Modal::Image];

    pub fn index(self) -> usize {
        match self {
            Modal::Graph => 0,
            Modal::Attr => 1,
            Modal::Image => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modal::Graph => "graph",
            Modal::Attr => "attr",
            Modal::Image => "image",
        }
    }
}

/// Constant per-KG inputs derived once from a [`KnowledgeGraph`].
#[derive(Clone, Debug)]
pub struct KgFeatures {
    /// Row-normalized adjacency with self loops, `D⁻¹(A + I)`.
    pub adjacency: Arc<Csr>,
    /// Multi-hot attribute table, `entity_count × attribute_count`.
    pub attributes: Arc<Csr>,
    /// Multi-hot neighbor table without self loops (graph decoding labels).
    pub neighbors: Arc<Csr>,
    pub images: Matrix,
}

impl KgFeatures {
    pub fn new(kg: &KnowledgeGraph) -> Self {
        let n = kg.entity_count();
        let neighbor_lists = kg.neighbors();
        let adjacency_rows: Vec<Vec<(usize, f64)>> = neighbor_lists
            .iter()
            .enumerate()
            .map(|(e, nbrs)| {
                let w = 1.0 / (nbrs.len() + 1) as f64;
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(nbrs.len() + 1);
                row.push((e, w));
                row.extend(nbrs.iter().map(|&t| (t, w)));
                row
            })
            .collect();
        let neighbor_rows: Vec<Vec<(usize, f64)>> = neighbor_lists
            .iter()
            .map(|nbrs| nbrs.iter().map(|&t| (t, 1.0)).collect())
            .collect();
        let attr_rows: Vec<Vec<(usize, f64)>> = kg
            .attribute_lists()
            .into_iter()
            .map(|l| l.into_iter().map(|a| (a, 1.0)).collect())
            .collect();
        KgFeatures {
            adjacency: Arc::new(Csr::from_rows(n, &adjacency_rows)),
            attributes: Arc::new(Csr::from_rows(kg.attribute_count(), &attr_rows)),
            neighbors: Arc::new(Csr::from_rows(n, &neighbor_rows)),
            images: kg.image_features.clone(),
        }
    }

    pub fn entity_count(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn attribute_count(&self) -> usize {
        self.attributes.cols()
    }

    pub fn image_dim(&self) -> usize {
        self.images.ncols()
    }

    /// Concrete feature targets of `ids` for one modal: multi-hot neighbor or
    /// attribute rows, or image feature rows.
    pub fn concrete(&self, modal: Modal, ids: &[usize]) -> Matrix {
        match modal {
            Modal::Graph => self.neighbors.gather_dense(ids),
            Modal::Attr => self.attributes.gather_dense(ids),
            Modal::Image => self.images.select(ndarray::Axis(0), ids),
        }
    }
}

/// Per-modal vocabulary sizes of one KG.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgShape {
    pub entities: usize,
    pub attributes: usize,
    pub image_dim: usize,
}

impl KgShape {
    pub fn of(features: &KgFeatures) -> Self {
        KgShape {
            entities: features.entity_count(),
            attributes: features.attribute_count(),
            image_dim: features.image_dim(),
        }
    }

    /// Width of the concrete features of `modal`.
    pub fn width(&self, modal: Modal) -> usize {
        match modal {
            Modal::Graph => self.entities,
            Modal::Attr => self.attributes,
            Modal::Image => self.image_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Sub-embedding width `d`.
    pub dim: usize,
    /// Joint embedding width.
    pub joint_dim: usize,
    /// Number of neighbor aggregation layers in the graph encoder.
    pub graph_layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 300,
            joint_dim: 300,
            graph_layers: 2,
        }
    }
}

/// Parameter handles of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// Entity tables indexed by [`Side::index`].
    pub entity: [ParamId; 2],
    pub graph: Vec<Linear>,
    pub attr: [Linear; 2],
    pub image: Linear,
    pub fusion: Linear,
}

impl EncoderParams {
    pub fn new(
        store: &mut ParamStore,
        config: &EncoderConfig,
        source: KgShape,
        target: KgShape,
        rng: &mut impl Rng,
    ) -> Self {
        let d = config.dim;
        let entity = [
            store.register("encoder.entity.source", xavier_uniform(source.entities, d, rng)),
            store.register("encoder.entity.target", xavier_uniform(target.entities, d, rng)),
        ];
        let graph = (0..config.graph_layers)
            .map(|l| Linear::new(store, &format!("encoder.graph.layer{l}"), d, d, rng))
            .collect();
        let attr = [
            Linear::new(store, "encoder.attr.source", source.attributes, d, rng),
            Linear::new(store, "encoder.attr.target", target.attributes, d, rng),
        ];
        let image = Linear::new(store, "encoder.image", source.image_dim, d, rng);
        let fusion = Linear::new(store, "encoder.fusion", 3 * d, config.joint_dim, rng);
        EncoderParams {
            config: config.clone(),
            entity,
            graph,
            attr,
            image,
            fusion,
        }
    }
}

/// Sub-embedding nodes, indexed by [`Modal::index`].
pub type SubVars = [Var; 3];

/// Sub-embeddings of every entity of one KG, as graph nodes.
pub fn encode_side(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    features: &KgFeatures,
    side: Side,
) -> SubVars {
    let table_id = params.entity[side.index()];
    let mut h = g.param(table_id, store.get(table_id));
    for layer in &params.graph {
        let agg = g.spmm(features.adjacency.clone(), h);
        let lin = layer.forward(g, store, agg);
        h = g.tanh(lin);
    }
    let attr_lin = &params.attr[side.index()];
    let w = g.param(attr_lin.weight, store.get(attr_lin.weight));
    let attr = g.spmm(features.attributes.clone(), w);
    let b = g.param(attr_lin.bias, store.get(attr_lin.bias));
    let attr = g.add_row(attr, b);
    let images = g.constant(features.images.clone());
    let image = params.image.forward(g, store, images);
    [h, attr, image]
}

pub fn gather(g: &mut Graph, all: &SubVars, ids: &[usize]) -> SubVars {
    [
        g.gather_rows(all[0], ids),
        g.gather_rows(all[1], ids),
        g.gather_rows(all[2], ids),
    ]
}

/// Inverted dropout on each sub-embedding.
pub fn dropout(g: &mut Graph, subs: &SubVars, rate: f64, rng: &mut impl Rng) -> SubVars {
    if rate <= 0.0 {
        return *subs;
    }
    let keep = 1.0 - rate;
    subs.map(|v| {
        let shape = g.value(v).dim();
        let mask = Matrix::from_shape_simple_fn(shape, || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = g.constant(mask);
        g.mul(v, m)
    })
}

/// Joint embedding from sub-embeddings: `Linear(Concat(g, a, i))`.
pub fn fuse_vars(g: &mut Graph, store: &ParamStore, params: &EncoderParams, subs: &SubVars) -> Var {
    let cat = g.concat_cols(subs);
    params.fusion.forward(g, store, cat)
}

/// Materialized sub-embeddings and joint embedding of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalEmbeddings {
    pub graph: Matrix,
    pub attr: Matrix,
    pub image: Matrix,
    pub joint: Matrix,
}

impl ModalEmbeddings {
    pub fn sub(&self, modal: Modal) -> &Matrix {
        match modal {
            Modal::Graph => &self.graph,
            Modal::Attr => &self.attr,
            Modal::Image => &self.image,
        }
    }

    pub fn all_finite(&self) -> bool {
        [&self.graph, &self.attr, &self.image, &self.joint]
            .iter()
            .all(|m| m.iter().all(|x| x.is_finite()))
    }
}

/// Deterministic (evaluation-mode) encoding of `ids` on one KG.
pub fn encode(
    features: &KgFeatures,
    side: Side,
    ids: &[usize],
    params: &EncoderParams,
    store: &ParamStore,
) -> Result<ModalEmbeddings> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= features.entity_count()) {
        return Err(GeeaError::Argument(format!(
            "entity id {bad} out of range for {} entities",
            features.entity_count()
        )));
    }
    let mut g = Graph::new();
    let all = encode_side(&mut g, store, params, features, side);
    let subs = gather(&mut g, &all, ids);
    let joint = fuse_vars(&mut g, store, params, &subs);
    Ok(ModalEmbeddings {
        graph: g.value(subs[0]).clone(),
        attr: g.value(subs[1]).clone(),
        image: g.value(subs[2]).clone(),
        joint: g.value(joint).clone(),
    })
}

/// Fusion applied to materialized sub-embeddings.
pub fn fuse(graph: &Matrix, attr: &Matrix, image: &Matrix, params: &EncoderParams, store: &ParamStore) -> Result<Matrix> {
    let d = params.config.dim;
    for (name, m) in [("graph", graph), ("attr", attr), ("image", image)] {
        if m.ncols() != d || m.nrows() != graph.nrows() {
            return Err(GeeaError::Shape(format!(
                "{name} sub-embedding is {:?}, expected ({}, {d})",
                m.dim(),
                graph.nrows()
            )));
        }
    }
    let mut g = Graph::new();
    let subs = [g.constant(graph.clone()), g.constant(attr.clone()), g.constant(image.clone())];
    let joint = fuse_vars(&mut g, store, params, &subs);
    Ok(g.value(joint).clone())
}
