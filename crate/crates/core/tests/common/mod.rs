#![allow(dead_code)]

pub mod grad;

use geea::autograd::{Graph, Matrix, Var};
use geea::decoders::DecoderConfig;
use geea::encoder::EncoderConfig;
use geea::kgdata::{generate_synthetic_pair, AlignmentDataset, SyntheticConfig};
use geea::mvae::VaeConfig;
use geea::params::{ParamId, ParamStore};
use geea::training::TrainConfig;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Finite-difference step and the relative tolerance every gradient check uses.
pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Gradients smaller than this count as zero.
pub const FD_ZERO: f64 = 1e-8;
/// Floor of the relative-error denominator, so that gradients near zero are
/// compared absolutely at this scale.
pub const FD_FLOOR: f64 = 1e-6;

pub fn tiny_dataset(entities: usize, seed: u64) -> AlignmentDataset {
    let cfg = SyntheticConfig {
        entities,
        relations: 3,
        attributes: 6,
        image_dim: 4,
        ..SyntheticConfig::default()
    };
    generate_synthetic_pair(&cfg, seed).unwrap()
}

/// Small model without dropout, for gradient checks and fast runs.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 5,
        batch_size: 4,
        unsup_batch_size: 5,
        learning_rate: 0.01,
        dropout: 0.0,
        encoder: EncoderConfig {
            dim: 5,
            joint_dim: 4,
            graph_layers: 2,
        },
        vae: VaeConfig {
            hidden: vec![6],
            latent_dim: 3,
        },
        decoder: DecoderConfig { hidden: vec![6] },
        patience: 100,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub nonzero: usize,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Compares analytic gradients of `loss` with central differences on up to
/// `per_param` entries of every parameter in `store` (all when `None`).
pub fn fd_check(
    store: &mut ParamStore,
    per_param: Option<usize>,
    mut loss: impl FnMut(&mut Graph, &ParamStore) -> Var,
) -> FdReport {
    let mut g = Graph::new();
    let root = loss(&mut g, store);
    let grads = g.backward(root);
    let analytic: Vec<(ParamId, Matrix)> = grads.param_grads().into_iter().map(|(id, m)| (id, m.clone())).collect();
    let lookup = |id: ParamId| analytic.iter().find(|(i, _)| *i == id).map(|(_, m)| m.clone());

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let ids: Vec<ParamId> = store.ids().collect();
    let mut report = FdReport {
        checked: 0,
        max_rel_error: 0.0,
        nonzero: 0,
    };
    for id in ids {
        let shape = store.get(id).dim();
        let mut entries: Vec<(usize, usize)> = (0..shape.0).flat_map(|r| (0..shape.1).map(move |c| (r, c))).collect();
        entries.shuffle(&mut rng);
        if let Some(k) = per_param {
            entries.truncate(k);
        }
        let grad = lookup(id).unwrap_or_else(|| Matrix::zeros(shape));
        for (r, c) in entries {
            let orig = store.get(id)[[r, c]];
            store.get_mut(id)[[r, c]] = orig + FD_STEP;
            let mut g1 = Graph::new();
            let v1 = loss(&mut g1, store);
            let plus = g1.scalar(v1);
            store.get_mut(id)[[r, c]] = orig - FD_STEP;
            let mut g2 = Graph::new();
            let v2 = loss(&mut g2, store);
            let minus = g2.scalar(v2);
            store.get_mut(id)[[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grad[[r, c]];
            let err = rel_error(a, numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
            }
            if a.abs() > FD_ZERO {
                report.nonzero += 1;
            }
            report.checked += 1;
        }
    }
    report
}

/// Harmonic number H_n.
pub fn harmonic(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
