//! Concrete-feature decoders: reconstructed sub-embeddings back to neighbor
//! labels, attribute labels and image features.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, Var};
pub use crate::encoder::KgShape;
use crate::encoder::Modal;
use crate::error::{GeeaError, Result};
use crate::kgdata::{KnowledgeGraph, Side};
use crate::params::{hidden_stack, run_stack, Activation, HiddenLayer, Linear, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub hidden: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            hidden: vec![300, 1000],
        }
    }
}

/// Hidden stack shared by both KGs plus an output layer per KG. The image
/// modal has one output layer because both KGs share the image feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalDecoder {
    pub hidden: Vec<HiddenLayer>,
    pub outputs: Vec<Linear>,
}

impl ModalDecoder {
    fn output(&self, side: Side) -> &Linear {
        if self.outputs.len() == 1 {
            &self.outputs[0]
        } else {
            &self.outputs[side.index()]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    /// Indexed by [`Modal::index`].
    pub modals: [ModalDecoder; 3],
}

impl DecoderParams {
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        config: &DecoderConfig,
        source: KgShape,
        target: KgShape,
        rng: &mut impl Rng,
    ) -> Self {
        let last = config.hidden.len().saturating_sub(1);
        let act = |i: usize| if i == last { Activation::Tanh } else { Activation::Relu };
        let h = config.hidden.last().copied().unwrap_or(dim);
        let modals = Modal::ALL.map(|m| {
            let name = format!("decoder.{}", m.name());
            let hidden = hidden_stack(store, &name, dim, &config.hidden, act, rng);
            let outputs = match m {
                Modal::Image => vec![Linear::new(store, &format!("{name}.output"), h, source.image_dim, rng)],
                _ => vec![
                    Linear::new(store, &format!("{name}.output.source"), h, source.width(m), rng),
                    Linear::new(store, &format!("{name}.output.target"), h, target.width(m), rng),
                ],
            };
            ModalDecoder { hidden, outputs }
        });
        DecoderParams {
            config: config.clone(),
            modals,
        }
    }

    pub fn output_width(&self, modal: Modal, side: Side) -> usize {
        self.modals[modal.index()].output(side).fan_out
    }
}

/// Raw output layer values: logits for graph/attr, regression values for image.
pub fn decode_logits_vars(g: &mut Graph, store: &ParamStore, params: &DecoderParams, modal: Modal, side: Side, input: Var) -> Var {
    let dec = &params.modals[modal.index()];
    let h = run_stack(&dec.hidden, g, store, input);
    dec.output(side).forward(g, store, h)
}

/// Decoder output: sigmoid probabilities for graph/attr, reals for image.
pub fn decode_vars(g: &mut Graph, store: &ParamStore, params: &DecoderParams, modal: Modal, side: Side, input: Var) -> Var {
    let out = decode_logits_vars(g, store, params, modal, side, input);
    match modal {
        Modal::Image => out,
        _ => g.sigmoid(out),
    }
}

/// Decodes one modal toward the KG on `side`, whose widths are `shape`.
pub fn decode_modal(
    sub: &Matrix,
    modal: Modal,
    side: Side,
    shape: &KgShape,
    params: &DecoderParams,
    store: &ParamStore,
) -> Result<Matrix> {
    let have = params.output_width(modal, side);
    if have != shape.width(modal) {
        return Err(GeeaError::Shape(format!(
            "{} decoder emits {have} columns but the target KG needs {}",
            modal.name(),
            shape.width(modal)
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(sub.clone());
    let out = decode_vars(&mut g, store, params, modal, side, x);
    Ok(g.value(out).clone())
}

/// Decoded features of a batch toward one KG.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcreteFeaturePrediction {
    pub graph: Matrix,
    pub attr: Matrix,
    pub image: Matrix,
}

impl ConcreteFeaturePrediction {
    pub fn get(&self, modal: Modal) -> &Matrix {
        match modal {
            Modal::Graph => &self.graph,
            Modal::Attr => &self.attr,
            Modal::Image => &self.image,
        }
    }
}

pub fn decode_all(
    subs: &[Matrix; 3],
    side: Side,
    shape: &KgShape,
    params: &DecoderParams,
    store: &ParamStore,
) -> Result<ConcreteFeaturePrediction> {
    Ok(ConcreteFeaturePrediction {
        graph: decode_modal(&subs[0], Modal::Graph, side, shape, params, store)?,
        attr: decode_modal(&subs[1], Modal::Attr, side, shape, params, store)?,
        image: decode_modal(&subs[2], Modal::Image, side, shape, params, store)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DiscretePolicy {
    /// Ids whose probability exceeds the threshold.
    Threshold(f64),
    /// The k most probable ids.
    TopK(usize),
}

impl Default for DiscretePolicy {
    fn default() -> Self {
        DiscretePolicy::Threshold(0.5)
    }
}

/// Discrete features of one decoded entity.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcreteFeatures {
    pub neighbors: Vec<(usize, f64)>,
    pub attributes: Vec<(usize, f64)>,
    /// Entity with the nearest real image and its cosine similarity.
    pub nearest_image: Option<(usize, f64)>,
}

/// Selects ids from one probability row. Results are sorted by descending
/// probability, ties by ascending id.
pub fn select_ids(row: &[f64], policy: DiscretePolicy) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = row.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    match policy {
        DiscretePolicy::Threshold(t) => ranked.into_iter().filter(|&(_, p)| p > t).collect(),
        DiscretePolicy::TopK(k) => {
            ranked.truncate(k);
            ranked
        }
    }
}

/// Row of `table` with the highest cosine similarity to `query`, restricted to
/// rows where `mask` is true. Ties go to the smaller id.
pub fn nearest_row(query: &[f64], table: &Matrix, mask: Option<&[bool]>) -> Option<(usize, f64)> {
    let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let mut best: Option<(usize, f64)> = None;
    for (i, row) in table.rows().into_iter().enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let rn = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let cos = row.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() / (qn * rn);
        if best.is_none_or(|(_, b)| cos > b) {
            best = Some((i, cos));
        }
    }
    best
}

/// Turns a decoded batch into discrete features. The image candidates are the
/// rows of `kg` that carry a real image.
pub fn discretize_prediction(
    prediction: &ConcreteFeaturePrediction,
    policy: DiscretePolicy,
    kg: &KnowledgeGraph,
) -> Vec<ConcreteFeatures> {
    (0..prediction.graph.nrows())
        .map(|i| {
            let image: Vec<f64> = prediction.image.row(i).to_vec();
            ConcreteFeatures {
                neighbors: select_ids(&prediction.graph.row(i).to_vec(), policy),
                attributes: select_ids(&prediction.attr.row(i).to_vec(), policy),
                nearest_image: nearest_row(&image, &kg.image_features, Some(&kg.image_mask)),
            }
        })
        .collect()
}

/// One line of a synthesized-entity dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesizedRecord {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub source_entity: Option<String>,
    pub neighbors: Vec<String>,
    pub attributes: Vec<String>,
    pub nearest_image_entity: Option<String>,
    pub scores: BTreeMap<String, Vec<f64>>,
}

impl SynthesizedRecord {
    pub fn from_features(features: &ConcreteFeatures, kg: &KnowledgeGraph, source_entity: Option<String>) -> Self {
        let mut scores = BTreeMap::new();
        scores.insert("neighbors".to_string(), features.neighbors.iter().map(|p| p.1).collect());
        scores.insert("attributes".to_string(), features.attributes.iter().map(|p| p.1).collect());
        scores.insert(
            "nearest_image".to_string(),
            features.nearest_image.iter().map(|p| p.1).collect(),
        );
        SynthesizedRecord {
            source_entity,
            neighbors: features.neighbors.iter().map(|&(e, _)| kg.entity_names[e].clone()).collect(),
            attributes: features
                .attributes
                .iter()
                .map(|&(a, _)| kg.attribute_names[a].clone())
                .collect(),
            nearest_image_entity: features.nearest_image.map(|(e, _)| kg.entity_names[e].clone()),
            scores,
        }
    }
}
