//! Finite-difference checks shared by the gradient tests and the acceptance run.

use super::{fd_check, tiny_config, tiny_dataset, FdReport};
use geea::autograd::{Graph, Matrix, Var};
use geea::encoder::{encode_side, fuse_vars, gather, KgShape, Modal};
use geea::kgdata::Side;
use geea::losses::{
    distribution_match_vars, post_reconstruction_vars, prediction_match_vars, prior_reconstruction_vars,
    NegativePolicy, TermSwitches,
};
use geea::mvae::{run_flows_vars, vae_forward_vars, FlowBatch, FlowTag, Noise, NoiseMode};
use geea::params::ParamStore;
use geea::training::{dataset_features, step_objective, stream_rng, Model, StepBatch, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
}

/// The whole training objective with only `terms` active. Terms must not
/// include post reconstruction, whose detached target moves under finite
/// differences; see [`post_through_model`].
pub fn step(terms: TermSwitches) -> FdReport {
    assert!(!terms.post);
    let ds = tiny_dataset(10, 3);
    let features = dataset_features(&ds);
    let config = TrainConfig { terms, ..tiny_config() };
    let mut model = Model::new(&config, KgShape::of(&features[0]), KgShape::of(&features[1])).unwrap();
    let supervised = ds.seed_alignments.clone();
    assert!(supervised.len() >= 2);
    let source: Vec<usize> = (0..6).collect();
    let target: Vec<usize> = (2..8).collect();
    let mut store = std::mem::take(&mut model.store);
    fd_check(&mut store, Some(2), |g, st| {
        let m = Model {
            store: st.clone(),
            ..model.clone()
        };
        let batch = StepBatch {
            supervised: &supervised,
            source: &source,
            target: &target,
        };
        let mut rng = stream_rng(7, 1);
        step_objective(g, &m, &features, &config, batch, &mut rng).unwrap().total
    })
}

pub fn prediction_match_only() -> FdReport {
    step(TermSwitches::prediction_only())
}

pub fn distribution_match_only() -> FdReport {
    step(TermSwitches {
        prediction_match: false,
        distribution_match: true,
        prior: false,
        post: false,
    })
}

pub fn prior_only() -> FdReport {
    step(TermSwitches {
        prediction_match: false,
        distribution_match: false,
        prior: true,
        post: false,
    })
}

pub fn all_but_post() -> FdReport {
    step(TermSwitches {
        post: false,
        ..TermSwitches::default()
    })
}

/// Post reconstruction from encoder to fusion with the true joint held at its
/// unperturbed value.
pub fn post_through_model() -> FdReport {
    let ds = tiny_dataset(10, 3);
    let features = dataset_features(&ds);
    let mut model = Model::new(&tiny_config(), KgShape::of(&features[0]), KgShape::of(&features[1])).unwrap();
    let xs: Vec<usize> = ds.seed_alignments.iter().map(|p| p.0).collect();
    let ys: Vec<usize> = ds.seed_alignments.iter().map(|p| p.1).collect();
    let truth = {
        let mut g = Graph::new();
        let all = encode_side(&mut g, &model.store, &model.encoder, &features[1], Side::Target);
        let sy = gather(&mut g, &all, &ys);
        let jy = fuse_vars(&mut g, &model.store, &model.encoder, &sy);
        g.value(jy).clone()
    };
    let mut store = std::mem::take(&mut model.store);
    fd_check(&mut store, Some(2), |g, st| {
        let sx_all = encode_side(g, st, &model.encoder, &features[0], Side::Source);
        let sy_all = encode_side(g, st, &model.encoder, &features[1], Side::Target);
        let sx = gather(g, &sx_all, &xs);
        let sy = gather(g, &sy_all, &ys);
        let batch = FlowBatch {
            source: &sx,
            target: Some(&sy),
            supervised: true,
        };
        let mut rng = stream_rng(7, 1);
        let out = run_flows_vars(g, st, &model.mvae, batch, &[FlowTag::SourceToTarget], NoiseMode::Sample, &mut rng).unwrap();
        let recon = out[&FlowTag::SourceToTarget].clone().map(|v| v.reconstruction);
        let t = g.constant(truth.clone());
        post_reconstruction_vars(g, st, &model.encoder, &recon, t)
    })
}

/// Registers each matrix as a parameter so the check covers loss inputs.
fn input_store(inputs: &[Matrix]) -> ParamStore {
    let mut store = ParamStore::new();
    for (i, m) in inputs.iter().enumerate() {
        store.register(format!("input{i}"), m.clone());
    }
    store
}

fn inputs(g: &mut Graph, store: &ParamStore) -> Vec<Var> {
    store.ids().map(|id| g.param(id, store.get(id))).collect()
}

pub fn prediction_match_inputs(policy: NegativePolicy) -> FdReport {
    let mut store = input_store(&[random(5, 4, 1), random(5, 4, 2)]);
    fd_check(&mut store, None, |g, st| {
        let v = inputs(g, st);
        prediction_match_vars(g, v[0], v[1], 0.1, policy).unwrap()
    })
}

pub fn distribution_match_inputs() -> FdReport {
    let sigma = random(4, 3, 4).mapv(|x| 0.5 + x.abs());
    let mut store = input_store(&[random(4, 3, 3), sigma]);
    fd_check(&mut store, None, |g, st| {
        let v = inputs(g, st);
        distribution_match_vars(g, v[0], v[1])
    })
}

pub fn prior_bce_inputs() -> FdReport {
    let labels = random(4, 6, 6).mapv(|x| if x > 0.3 { 1.0 } else { 0.0 });
    let mut store = input_store(&[random(4, 6, 5)]);
    fd_check(&mut store, None, |g, st| {
        let v = inputs(g, st);
        let probs = g.sigmoid(v[0]);
        prior_reconstruction_vars(g, probs, labels.clone(), Modal::Attr)
    })
}

pub fn prior_mse_inputs() -> FdReport {
    let target = random(4, 3, 8);
    let mut store = input_store(&[random(4, 3, 7)]);
    fd_check(&mut store, None, |g, st| {
        let v = inputs(g, st);
        prior_reconstruction_vars(g, v[0], target.clone(), Modal::Image)
    })
}

pub fn small_model() -> (Model, [geea::encoder::KgFeatures; 2]) {
    let ds = tiny_dataset(10, 4);
    let features = dataset_features(&ds);
    let model = Model::new(&tiny_config(), KgShape::of(&features[0]), KgShape::of(&features[1])).unwrap();
    (model, features)
}

pub fn encoder_and_fusion() -> FdReport {
    let (mut model, features) = small_model();
    let mut store = std::mem::take(&mut model.store);
    fd_check(&mut store, Some(4), |g, st| {
        let subs = encode_side(g, st, &model.encoder, &features[1], Side::Target);
        let joint = fuse_vars(g, st, &model.encoder, &subs);
        let t = g.tanh(joint);
        let sq = g.square(t);
        g.sum(sq)
    })
}

pub fn vae_cell() -> FdReport {
    let (mut model, _) = small_model();
    let x = random(4, model.mvae.dim, 11);
    let eps = random(4, model.mvae.config.latent_dim, 12);
    let mut store = std::mem::take(&mut model.store);
    fd_check(&mut store, Some(4), |g, st| {
        let input = g.constant(x.clone());
        let v = vae_forward_vars::<ChaCha8Rng>(g, st, model.mvae.cell(Modal::Graph), input, Noise::Fixed(eps.clone()));
        let sq = g.square(v.reconstruction);
        let a = g.sum(sq);
        let b = g.sum(v.z);
        g.add(a, b)
    })
}

/// Post reconstruction on free inputs, with the true joint kept out of the
/// parameter store (its analytic gradient is zero by construction).
pub fn post_inputs() -> FdReport {
    let (model, _) = small_model();
    let d = model.encoder.config.dim;
    let truth = random(4, model.encoder.config.joint_dim, 30);
    let mut store = model.store.clone();
    let recon: Vec<_> = (0..3).map(|i| store.register(format!("recon{i}"), random(4, d, 20 + i))).collect();
    fd_check(&mut store, Some(4), |g, st| {
        let r: [Var; 3] = [0, 1, 2].map(|i| g.param(recon[i], st.get(recon[i])));
        let t = g.constant(truth.clone());
        post_reconstruction_vars(g, st, &model.encoder, &r, t)
    })
}

/// Gradients reaching the true joint, the reconstructions and the fusion
/// weights when only the post loss is differentiated.
pub struct PostGradients {
    pub true_joint_abs_sum: f64,
    pub reconstruction_nonzero: bool,
    pub fusion_nonzero: bool,
}

pub fn post_gradients() -> PostGradients {
    let (model, _) = small_model();
    let d = model.encoder.config.dim;
    let j = model.encoder.config.joint_dim;
    let mut store = model.store.clone();
    let recon: Vec<_> = (0..3).map(|i| store.register(format!("recon{i}"), random(4, d, 20 + i))).collect();
    let truth = store.register("truth", random(4, j, 30));
    let mut g = Graph::new();
    let r: [Var; 3] = [0, 1, 2].map(|i| g.param(recon[i], store.get(recon[i])));
    let t = g.param(truth, store.get(truth));
    let l = post_reconstruction_vars(&mut g, &store, &model.encoder, &r, t);
    let grads = g.backward(l);
    let pg = grads.param_grads();
    let nonzero = |id| pg.iter().find(|(i, _)| *i == id).is_some_and(|(_, m)| m.iter().any(|&x| x != 0.0));
    PostGradients {
        true_joint_abs_sum: pg.iter().find(|(i, _)| *i == truth).map_or(0.0, |(_, m)| m.iter().map(|x| x.abs()).sum()),
        reconstruction_nonzero: recon.iter().all(|&id| nonzero(id)),
        fusion_nonzero: nonzero(model.encoder.fusion.weight),
    }
}

/// Every check with a label, for reporting.
pub fn all_checks() -> Vec<(&'static str, FdReport)> {
    vec![
        ("prediction match (in-batch) inputs", prediction_match_inputs(NegativePolicy::InBatch)),
        ("prediction match (no negatives) inputs", prediction_match_inputs(NegativePolicy::Disabled)),
        ("distribution match inputs", distribution_match_inputs()),
        ("prior BCE inputs", prior_bce_inputs()),
        ("prior MSE inputs", prior_mse_inputs()),
        ("post inputs", post_inputs()),
        ("encoder + fusion", encoder_and_fusion()),
        ("VAE cell", vae_cell()),
        ("objective: prediction match", prediction_match_only()),
        ("objective: distribution match", distribution_match_only()),
        ("objective: prior", prior_only()),
        ("objective: all but post", all_but_post()),
        ("objective: post through model", post_through_model()),
    ]
}
