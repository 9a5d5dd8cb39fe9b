//! Joint optimization of the encoder, M-VAE and decoders over supervised and
//! unsupervised batches, with early stopping and checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{read_store, read_tensors, write_store, write_tensors, DType};
use crate::autograd::{Graph, Matrix, Var};
use crate::decoders::{decode_vars, DecoderConfig, DecoderParams};
use crate::encoder::{
    dropout, encode_side, fuse_vars, gather, EncoderConfig, EncoderParams, KgFeatures, KgShape, Modal,
    ModalEmbeddings, SubVars,
};
use crate::error::{GeeaError, Result};
use crate::evalmetrics::evaluate_model_alignment;
use crate::kgdata::{AlignmentDataset, Pair, Side};
use crate::losses::{
    distribution_match_vars, post_reconstruction_vars, prediction_match_vars, prior_reconstruction_vars,
    LossBreakdown, LossWeights, NegativePolicy, TermSwitches,
};
use crate::mvae::{run_flows_vars, FlowBatch, FlowTag, MvaeParams, NoiseMode, VaeConfig};
use crate::params::{Adam, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub unsup_batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: String,
    pub dropout: f64,
    pub weights: LossWeights,
    pub terms: TermSwitches,
    pub encoder: EncoderConfig,
    pub vae: VaeConfig,
    pub decoder: DecoderConfig,
    pub patience: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 2500,
            unsup_batch_size: 2800,
            learning_rate: 0.001,
            optimizer: "adam".into(),
            dropout: 0.5,
            weights: LossWeights::default(),
            terms: TermSwitches::default(),
            encoder: EncoderConfig::default(),
            vae: VaeConfig::default(),
            decoder: DecoderConfig::default(),
            patience: 20,
            seed: 0,
            clip_norm: Some(5.0),
            temperature: 0.1,
        }
    }
}

/// Names of the shipped configurations.
pub const PRESETS: [&str; 6] = [
    "dbp15k_zh_en",
    "dbp15k_ja_en",
    "dbp15k_fr_en",
    "fb15k_db15k",
    "fb15k_yago15k",
    "synthetic",
];

impl TrainConfig {
    /// Built-in configuration by name; see [`PRESETS`].
    pub fn preset(name: &str) -> Option<Self> {
        let dbp = TrainConfig::default();
        let fb = TrainConfig {
            epochs: 300,
            batch_size: 3500,
            unsup_batch_size: 2500,
            learning_rate: 0.0005,
            vae: VaeConfig {
                hidden: vec![300, 300, 300],
                latent_dim: 300,
            },
            decoder: DecoderConfig {
                hidden: vec![300, 300, 1000],
            },
            ..TrainConfig::default()
        };
        match name {
            "dbp15k_zh_en" | "dbp15k_ja_en" | "dbp15k_fr_en" => Some(dbp),
            "fb15k_db15k" | "fb15k_yago15k" => Some(fb),
            "synthetic" => Some(Self::synthetic()),
            _ => None,
        }
    }

    /// Desk-scale settings for the 200-entity synthetic pair.
    pub fn synthetic() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 60,
            unsup_batch_size: 100,
            learning_rate: 0.01,
            dropout: 0.1,
            temperature: 0.5,
            encoder: EncoderConfig {
                dim: 32,
                joint_dim: 32,
                graph_layers: 2,
            },
            vae: VaeConfig {
                hidden: vec![32, 32],
                latent_dim: 16,
            },
            decoder: DecoderConfig { hidden: vec![32, 64] },
            patience: 100,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let arg = |m: String| Err(GeeaError::Argument(m));
        if self.batch_size < 2 || self.unsup_batch_size < 2 {
            return arg("batch sizes must be at least 2".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return arg(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !self.optimizer.eq_ignore_ascii_case("adam") {
            return arg(format!("unsupported optimizer {}", self.optimizer));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return arg(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if !(self.temperature > 0.0) {
            return arg(format!("temperature {} must be positive", self.temperature));
        }
        if self.encoder.dim == 0 || self.encoder.joint_dim == 0 || self.vae.latent_dim == 0 {
            return arg("model widths must be positive".into());
        }
        self.weights.validate()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GeeaError::Ingest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Every trainable parameter plus the handles that interpret them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub mvae: MvaeParams,
    pub decoder: DecoderParams,
    pub source_shape: KgShape,
    pub target_shape: KgShape,
}

impl Model {
    /// Freshly initialized model; initialization draws from stream 0 of the
    /// config seed.
    pub fn new(config: &TrainConfig, source: KgShape, target: KgShape) -> Result<Self> {
        if source.image_dim != target.image_dim {
            return Err(GeeaError::Shape(format!(
                "image widths differ: {} vs {}",
                source.image_dim, target.image_dim
            )));
        }
        let mut rng = stream_rng(config.seed, 0);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::new(&mut store, &config.encoder, source, target, &mut rng);
        let mvae = MvaeParams::new(&mut store, config.encoder.dim, &config.vae, &mut rng);
        let decoder = DecoderParams::new(&mut store, config.encoder.dim, &config.decoder, source, target, &mut rng);
        Ok(Model {
            store,
            encoder,
            mvae,
            decoder,
            source_shape: source,
            target_shape: target,
        })
    }

    pub fn shape(&self, side: Side) -> KgShape {
        match side {
            Side::Source => self.source_shape,
            Side::Target => self.target_shape,
        }
    }

    fn check_features(&self, features: &KgFeatures, side: Side) -> Result<()> {
        if KgShape::of(features) != self.shape(side) {
            return Err(GeeaError::Shape(format!(
                "{side:?} features {:?} do not match the model's {:?}",
                KgShape::of(features),
                self.shape(side)
            )));
        }
        Ok(())
    }

    /// Evaluation-mode embeddings of `ids`.
    pub fn embed(&self, features: &KgFeatures, side: Side, ids: &[usize]) -> Result<ModalEmbeddings> {
        self.check_features(features, side)?;
        crate::encoder::encode(features, side, ids, &self.encoder, &self.store)
    }

    /// Evaluation-mode embeddings of every entity.
    pub fn embed_all(&self, features: &KgFeatures, side: Side) -> Result<ModalEmbeddings> {
        let ids: Vec<usize> = (0..features.entity_count()).collect();
        self.embed(features, side, &ids)
    }
}

/// Encoder inputs for both KGs of the training view.
pub fn dataset_features(dataset: &AlignmentDataset) -> [KgFeatures; 2] {
    [KgFeatures::new(&dataset.source), KgFeatures::new(&dataset.target)]
}

/// Deterministic generator for one stream of a seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Entities processed by one optimization step.
#[derive(Clone, Copy, Debug)]
pub struct StepBatch<'a> {
    pub supervised: &'a [Pair],
    pub source: &'a [usize],
    pub target: &'a [usize],
}

/// Loss node and per-term values of one step. `flows` lists the flows that ran.
pub struct StepObjective {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub flows: Vec<FlowTag>,
}

/// Prior and post reconstruction of the flows in `outputs`, recorded into
/// `breakdown` and pushed onto `terms` with their weights.
#[allow(clippy::too_many_arguments)]
fn reconstruction_terms(
    g: &mut Graph,
    model: &Model,
    features: &[KgFeatures; 2],
    config: &TrainConfig,
    outputs: &BTreeMap<FlowTag, crate::mvae::FlowVars>,
    ids: [&[usize]; 2],
    joints: [Var; 2],
    terms: &mut Vec<(Var, f64)>,
    breakdown: &mut LossBreakdown,
) {
    let w = &config.weights;
    for (&flow, vars) in outputs {
        let out = flow.output_side();
        let wf = w.flow_weight(flow);
        if config.terms.prior {
            let mut by_modal = BTreeMap::new();
            for m in Modal::ALL {
                let pred = decode_vars(g, &model.store, &model.decoder, m, out, vars[m.index()].reconstruction);
                let target = features[out.index()].concrete(m, ids[out.index()]);
                let l = prior_reconstruction_vars(g, pred, target, m);
                by_modal.insert(m, g.scalar(l));
                terms.push((l, wf * w.prior));
            }
            breakdown.prior.insert(flow, by_modal);
        }
        if config.terms.post {
            let recon: SubVars = [0, 1, 2].map(|i| vars[i].reconstruction);
            let l = post_reconstruction_vars(g, &model.store, &model.encoder, &recon, joints[out.index()]);
            breakdown.post.insert(flow, g.scalar(l));
            terms.push((l, wf * w.post));
        }
    }
}

/// Builds the training objective of one step on `g`.
pub fn step_objective(
    g: &mut Graph,
    model: &Model,
    features: &[KgFeatures; 2],
    config: &TrainConfig,
    batch: StepBatch<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<StepObjective> {
    let all = [
        encode_side(g, &model.store, &model.encoder, &features[0], Side::Source),
        encode_side(g, &model.store, &model.encoder, &features[1], Side::Target),
    ];
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut breakdown = LossBreakdown::default();
    let mut flows = Vec::new();

    if !batch.supervised.is_empty() {
        let xs: Vec<usize> = batch.supervised.iter().map(|p| p.0).collect();
        let ys: Vec<usize> = batch.supervised.iter().map(|p| p.1).collect();
        let sx = gather(g, &all[0], &xs);
        let sx = dropout(g, &sx, config.dropout, rng);
        let sy = gather(g, &all[1], &ys);
        let sy = dropout(g, &sy, config.dropout, rng);
        let jx = fuse_vars(g, &model.store, &model.encoder, &sx);
        let jy = fuse_vars(g, &model.store, &model.encoder, &sy);
        if config.terms.prediction_match {
            let policy = if xs.len() >= 2 {
                NegativePolicy::InBatch
            } else {
                NegativePolicy::Disabled
            };
            let l = prediction_match_vars(g, jx, jy, config.temperature, policy)?;
            breakdown.prediction_match = Some(g.scalar(l));
            terms.push((l, 1.0));
        }
        if config.terms.prior || config.terms.post {
            let fb = FlowBatch {
                source: &sx,
                target: Some(&sy),
                supervised: true,
            };
            let out = run_flows_vars(g, &model.store, &model.mvae, fb, &FlowTag::MUTUAL, NoiseMode::Sample, rng)?;
            reconstruction_terms(g, model, features, config, &out, [&xs, &ys], [jx, jy], &mut terms, &mut breakdown);
            flows.extend(FlowTag::MUTUAL);
        }
    }

    if config.terms.uses_mvae() && !batch.source.is_empty() && !batch.target.is_empty() {
        let ux = gather(g, &all[0], batch.source);
        let ux = dropout(g, &ux, config.dropout, rng);
        let uy = gather(g, &all[1], batch.target);
        let uy = dropout(g, &uy, config.dropout, rng);
        let jx = fuse_vars(g, &model.store, &model.encoder, &ux);
        let jy = fuse_vars(g, &model.store, &model.encoder, &uy);
        let fb = FlowBatch {
            source: &ux,
            target: Some(&uy),
            supervised: false,
        };
        let out = run_flows_vars(g, &model.store, &model.mvae, fb, &FlowTag::SELF, NoiseMode::Sample, rng)?;
        if config.terms.distribution_match {
            let mut dm = 0.0;
            for vars in out.values() {
                for v in vars {
                    let l = distribution_match_vars(g, v.mu, v.sigma);
                    dm += g.scalar(l);
                    terms.push((l, config.weights.distribution_match));
                }
            }
            breakdown.distribution_match = Some(dm);
        }
        reconstruction_terms(
            g,
            model,
            features,
            config,
            &out,
            [batch.source, batch.target],
            [jx, jy],
            &mut terms,
            &mut breakdown,
        );
        flows.extend(FlowTag::SELF);
    }

    if terms.is_empty() {
        return Err(GeeaError::Contract("step has no active loss term".into()));
    }
    let mut total: Option<Var> = None;
    for (v, w) in terms {
        let scaled = g.scale(v, w);
        total = Some(match total {
            Some(t) => g.add(t, scaled),
            None => scaled,
        });
    }
    let total = total.unwrap();
    breakdown.total = g.scalar(total);
    Ok(StepObjective { total, breakdown, flows })
}

/// Splits `items` into `ceil(n / batch)` chunks of near-equal size, merging
/// one chunk away if that would leave a single-element chunk.
pub fn balanced_chunks<T: Clone>(items: &[T], batch: usize) -> Vec<Vec<T>> {
    let n = items.len();
    if n == 0 {
        return Vec::new();
    }
    let mut k = n.div_ceil(batch.max(1));
    if k > 1 && n / k < 2 {
        k -= 1;
    }
    let base = n / k;
    let extra = n % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

/// One step's loss values, as logged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_total: f64,
    pub valid_mrr: Option<f64>,
    pub steps: Vec<StepLog>,
}

/// Parameters, optimizer state and training progress.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub best_valid_mrr: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best: Option<ParamStore>,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(config: &TrainConfig, features: &[KgFeatures; 2]) -> Result<Self> {
        let model = Model::new(config, KgShape::of(&features[0]), KgShape::of(&features[1]))?;
        let optimizer = Adam::new(&model.store, config.clip_norm);
        Ok(TrainState {
            config: config.clone(),
            model,
            optimizer,
            epoch: 0,
            step: 0,
            best_valid_mrr: None,
            best_epoch: None,
            best: None,
            history: Vec::new(),
        })
    }
}

/// Target entities available for unsupervised sampling.
fn unsupervised_pools(dataset: &AlignmentDataset) -> (Vec<usize>, Vec<usize>) {
    let dangling = dataset.dangling_targets();
    let xs = (0..dataset.source.entity_count()).collect();
    let ys = (0..dataset.target.entity_count()).filter(|e| !dangling.contains(e)).collect();
    (xs, ys)
}

fn cycle<'a, T>(chunks: &'a [Vec<T>], step: usize, empty: &'a [T]) -> &'a [T] {
    if chunks.is_empty() {
        empty
    } else {
        &chunks[step % chunks.len()]
    }
}

/// One pass over the seed alignments. Each step takes one supervised chunk
/// and one unsupervised chunk per KG; shorter chunk lists are cycled.
pub fn train_epoch(
    state: &mut TrainState,
    dataset: &AlignmentDataset,
    features: &[KgFeatures; 2],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpochMetrics> {
    if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
        return Err(GeeaError::Argument(format!("learning rate {}", config.learning_rate)));
    }
    let mut seeds = dataset.seed_alignments.clone();
    seeds.shuffle(rng);
    let (mut xs, mut ys) = unsupervised_pools(dataset);
    xs.shuffle(rng);
    ys.shuffle(rng);
    let sup = balanced_chunks(&seeds, config.batch_size);
    let ux = balanced_chunks(&xs, config.unsup_batch_size);
    let uy = balanced_chunks(&ys, config.unsup_batch_size);
    let steps = sup.len().max(ux.len()).max(uy.len());
    let epoch = state.epoch + 1;
    let mut logs = Vec::with_capacity(steps);
    let empty: Vec<usize> = Vec::new();
    let empty_pairs: Vec<Pair> = Vec::new();
    for s in 0..steps {
        let batch = StepBatch {
            supervised: cycle(&sup, s, &empty_pairs),
            source: cycle(&ux, s, &empty),
            target: cycle(&uy, s, &empty),
        };
        let mut g = Graph::new();
        let obj = step_objective(&mut g, &state.model, features, config, batch, rng)?;
        if !obj.breakdown.total.is_finite() {
            return Err(GeeaError::Divergence {
                epoch,
                step: s,
                detail: format!("loss is {}", obj.breakdown.total),
            });
        }
        let grads = g.backward(obj.total);
        let pg = grads.param_grads();
        if pg.iter().any(|(_, m)| m.iter().any(|x| !x.is_finite())) {
            return Err(GeeaError::Divergence {
                epoch,
                step: s,
                detail: "non-finite gradient".into(),
            });
        }
        state.optimizer.apply(&mut state.model.store, &pg, config.learning_rate);
        state.step += 1;
        logs.push(StepLog {
            step: state.step,
            epoch,
            loss: obj.breakdown,
        });
    }
    state.epoch = epoch;
    let mean_total = logs.iter().map(|l| l.loss.total).sum::<f64>() / logs.len().max(1) as f64;
    Ok(EpochMetrics {
        epoch,
        mean_total,
        valid_mrr: None,
        steps: logs,
    })
}

/// Trains until `epochs` or until valid MRR stops improving for more than
/// `patience` epochs, then restores the best parameters. `on_epoch` runs
/// after every epoch, e.g. to write checkpoints.
pub fn fit(
    dataset: &AlignmentDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState, &EpochMetrics) -> Result<()>,
) -> Result<TrainState> {
    config.validate()?;
    dataset.validate()?;
    let features = dataset_features(dataset);
    let mut state = TrainState::new(config, &features)?;
    if dataset.valid_alignments.is_empty() {
        log::warn!("no validation pairs; training for the full {} epochs", config.epochs);
    }
    let mut stale = 0usize;
    while state.epoch < config.epochs {
        let mut rng = stream_rng(config.seed, state.epoch as u64 + 1);
        let mut metrics = train_epoch(&mut state, dataset, &features, config, &mut rng)?;
        if !dataset.valid_alignments.is_empty() {
            let mrr = evaluate_model_alignment(&state.model, &features, &dataset.valid_alignments)?.mrr;
            metrics.valid_mrr = Some(mrr);
            if state.best_valid_mrr.is_none_or(|b| mrr > b) {
                state.best_valid_mrr = Some(mrr);
                state.best_epoch = Some(state.epoch);
                state.best = Some(state.model.store.clone());
                stale = 0;
            } else {
                stale += 1;
            }
        }
        log::info!(
            "epoch {} loss {:.5} valid mrr {}",
            metrics.epoch,
            metrics.mean_total,
            metrics.valid_mrr.map_or("-".to_string(), |m| format!("{m:.4}"))
        );
        on_epoch(&state, &metrics)?;
        state.history.push(metrics);
        if stale > config.patience {
            log::info!("early stop after epoch {}", state.epoch);
            break;
        }
    }
    if let Some(best) = &state.best {
        state.model.store = best.clone();
    }
    Ok(state)
}

/// Contents of `meta.json` in a checkpoint directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub epoch: usize,
    pub step: u64,
    pub best_valid_mrr: Option<f64>,
    pub best_epoch: Option<usize>,
    pub config: TrainConfig,
    pub source: KgShape,
    pub target: KgShape,
    /// Dataset directory the model was trained on.
    pub data_dir: Option<PathBuf>,
    /// Dangling fraction applied to that dataset, if any.
    pub dangling_fraction: Option<f64>,
    pub dangling_seed: Option<u64>,
}

pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optim.bin";
pub const META_FILE: &str = "meta.json";

/// Writes `params.bin`, `optim.bin` and `meta.json` into `dir`. Values are
/// stored as 64-bit floats so a reload is bit-exact.
pub fn save_checkpoint(dir: &Path, state: &TrainState, meta_extra: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(PARAMS_FILE))?);
    write_store(&mut w, &state.model.store, DType::F64)?;
    w.flush()?;

    let store = &state.model.store;
    let mut names = Vec::new();
    for (id, name, _) in store.iter() {
        names.push((format!("m.{name}"), &state.optimizer.first_moment[id.index()]));
        names.push((format!("v.{name}"), &state.optimizer.second_moment[id.index()]));
    }
    let step = Matrix::from_elem((1, 1), state.optimizer.step as f64);
    let mut entries: Vec<(&str, &Matrix)> = names.iter().map(|(n, m)| (n.as_str(), *m)).collect();
    entries.push(("adam.step", &step));
    let mut w = BufWriter::new(File::create(dir.join(OPTIMIZER_FILE))?);
    write_tensors(&mut w, entries, DType::F64)?;
    w.flush()?;

    let meta = CheckpointMeta {
        format: 1,
        epoch: state.epoch,
        step: state.step,
        best_valid_mrr: state.best_valid_mrr,
        best_epoch: state.best_epoch,
        config: state.config.clone(),
        source: state.model.source_shape,
        target: state.model.target_shape,
        ..meta_extra.clone()
    };
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| GeeaError::Ingest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, CheckpointMeta)> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| GeeaError::Ingest {
        path: meta_path.clone(),
        message: e.to_string(),
    })?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let mut model = Model::new(&meta.config, meta.source, meta.target)?;
    let stored = read_store(&mut open(&dir.join(PARAMS_FILE))?)?;
    model.store.load_from(&stored).map_err(GeeaError::Archive)?;

    let mut optimizer = Adam::new(&model.store, meta.config.clip_norm);
    let optim_path = dir.join(OPTIMIZER_FILE);
    if optim_path.exists() {
        let tensors: BTreeMap<String, Matrix> = read_tensors(&mut open(&optim_path)?)?.into_iter().collect();
        for (id, name, value) in model.store.iter() {
            for (prefix, slot) in [("m", &mut optimizer.first_moment), ("v", &mut optimizer.second_moment)] {
                let m = tensors
                    .get(&format!("{prefix}.{name}"))
                    .ok_or_else(|| GeeaError::Archive(format!("optimizer entry {prefix}.{name} missing")))?;
                if m.dim() != value.dim() {
                    return Err(GeeaError::Archive(format!("optimizer entry {prefix}.{name} has wrong shape")));
                }
                slot[id.index()] = m.clone();
            }
        }
        optimizer.step = tensors.get("adam.step").map_or(0, |m| m[[0, 0]] as u64);
    }
    let state = TrainState {
        config: meta.config.clone(),
        model,
        optimizer,
        epoch: meta.epoch,
        step: meta.step,
        best_valid_mrr: meta.best_valid_mrr,
        best_epoch: meta.best_epoch,
        best: None,
        history: Vec::new(),
    };
    Ok((state, meta))
}

/// Writes every step log of `history` as JSON lines.
pub fn write_loss_log(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for m in history {
        for s in &m.steps {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        CheckpointMeta {
            format: 1,
            epoch: 0,
            step: 0,
            best_valid_mrr: None,
            best_epoch: None,
            config: TrainConfig::default(),
            source: KgShape {
                entities: 0,
                attributes: 0,
                image_dim: 0,
            },
            target: KgShape {
                entities: 0,
                attributes: 0,
                image_dim: 0,
            },
            data_dir: None,
            dangling_fraction: None,
            dangling_seed: None,
        }
    }
}

/// Draws a fresh generator for evaluation-time sampling.
pub fn eval_rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, u64::MAX)
}
