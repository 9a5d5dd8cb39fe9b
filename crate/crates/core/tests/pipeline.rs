mod common;

use std::collections::HashSet;
use std::path::Path;

use common::{harmonic, mean, tiny_config, tiny_dataset};
use geea::autograd::{Graph, Matrix};
use geea::encoder::{KgShape, Modal};
use geea::evalmetrics::{evaluate_alignment, fid, subsample_seeds, sweep_training_ratio, write_ratio_csv};
use geea::kgdata::{build_synthesis_split, load_dataset, save_dataset, LoadOptions, Side};
use geea::losses::loss_distribution_match;
use geea::mvae::{run_flows, sample_unconditional, FlowTag, NoiseMode};
use geea::theory::{monte_carlo_kl, GaussianStats};
use geea::training::{dataset_features, Model, TrainConfig, PRESETS};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

#[test]
fn synthetic_pair_is_a_bijection() {
    let ds = tiny_dataset(60, 2);
    let all: Vec<_> = ds
        .seed_alignments
        .iter()
        .chain(&ds.valid_alignments)
        .chain(&ds.test_alignments)
        .copied()
        .collect();
    assert_eq!(all.len(), 60);
    let xs: HashSet<_> = all.iter().map(|p| p.0).collect();
    let ys: HashSet<_> = all.iter().map(|p| p.1).collect();
    assert_eq!((xs.len(), ys.len()), (60, 60));
    assert_eq!(ds.seed_alignments.len(), 18);
    // Triples untouched by noise map through the bijection.
    let map: std::collections::HashMap<_, _> = all.iter().copied().collect();
    let tgt: HashSet<_> = ds.target.triples.iter().copied().collect();
    let kept = ds.source.triples.iter().filter(|&&(h, r, t)| tgt.contains(&(map[&h], r, map[&t]))).count();
    assert!(kept as f64 >= 0.8 * ds.source.triples.len() as f64);
}

#[test]
fn dataset_and_synthesis_split_survive_a_round_trip() {
    let ds = build_synthesis_split(&tiny_dataset(40, 5), 0.3, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path(), &LoadOptions::default()).unwrap();
    assert_eq!(back, ds);

    let dangling = back.dangling_targets();
    assert!(!dangling.is_empty());
    assert!(back.target.triples.iter().all(|&(h, _, t)| !dangling.contains(&h) && !dangling.contains(&t)));
    assert!(back.target.attributes.iter().all(|&(e, _)| !dangling.contains(&e)));
    assert!(dangling.iter().all(|&e| !back.target.image_mask[e]));
    let full = back.full_target();
    assert!(full.triples.iter().any(|&(h, _, t)| dangling.contains(&h) || dangling.contains(&t)));
}

#[test]
fn flows_share_one_cell_per_modal() {
    let ds = tiny_dataset(12, 1);
    let f = dataset_features(&ds);
    let mut model = Model::new(&tiny_config(), KgShape::of(&f[0]), KgShape::of(&f[1])).unwrap();
    let x = model.embed(&f[0], Side::Source, &[0, 1, 2]).unwrap();
    let y = model.embed(&f[1], Side::Target, &[3, 4, 5]).unwrap();
    let xs = [x.graph, x.attr, x.image];
    let ys = [y.graph, y.attr, y.image];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let run = |m: &Model, rng: &mut ChaCha8Rng| {
        run_flows(&xs, Some(&ys), true, &FlowTag::ALL, &m.mvae, &m.store, NoiseMode::Zero, rng).unwrap()
    };
    let before = run(&model, &mut rng);
    let id = model.mvae.cell(Modal::Attr).mu.bias;
    model.store.get_mut(id)[[0, 0]] += 0.5;
    let after = run(&model, &mut rng);
    for flow in FlowTag::ALL {
        assert_ne!(before[&flow][Modal::Attr.index()].mu, after[&flow][Modal::Attr.index()].mu, "{flow}");
        assert_eq!(before[&flow][Modal::Graph.index()], after[&flow][Modal::Graph.index()], "{flow}");
    }
}

#[test]
fn unconditional_samples_come_from_the_standard_prior() {
    let ds = tiny_dataset(12, 1);
    let f = dataset_features(&ds);
    let model = Model::new(&tiny_config(), KgShape::of(&f[0]), KgShape::of(&f[1])).unwrap();
    let n = 10_000;
    let samples = sample_unconditional(n, &model.mvae, &model.store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    // Decode an independent N(0, I) draw through the same cell.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for m in Modal::ALL {
        let z = gaussian(n, model.mvae.config.latent_dim, &mut rng);
        let mut g = Graph::new();
        let zv = g.constant(z);
        let out = model.mvae.cell(m).decode(&mut g, &model.store, zv);
        let want = g.value(out).mean_axis(ndarray::Axis(0)).unwrap();
        let got = samples[m.index()].mean_axis(ndarray::Axis(0)).unwrap();
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 0.05, "{m:?}: {a} vs {b}");
        }
    }
}

#[test]
fn distribution_match_agrees_with_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mu = gaussian(3, 2, &mut rng).mapv(|x| x + 1.5);
    let sigma = gaussian(3, 2, &mut rng).mapv(|x| 0.4 + 0.3 * x.abs());
    let exact = loss_distribution_match(&[(&mu, &sigma)]).unwrap();
    let mut estimates = Vec::new();
    for (&m, &s) in mu.iter().zip(sigma.iter()) {
        let q = GaussianStats::new(vec![m], vec![s]).unwrap();
        estimates.push(monte_carlo_kl(&q, &GaussianStats::standard(1), 200_000, &mut rng));
    }
    let mc = mean(&estimates);
    assert!((mc - exact).abs() / exact < 0.02, "{mc} vs {exact}");
}

/// Tr((C1^{1/2} C2 C1^{1/2})^{1/2}) through symmetric eigendecompositions.
fn brute_force_fid(a: &Matrix, b: &Matrix) -> f64 {
    let stats = |m: &Matrix| {
        let n = m.nrows() as f64;
        let mu = m.mean_axis(ndarray::Axis(0)).unwrap();
        let c = m - &mu;
        let cov = c.t().dot(&c) / (n - 1.0);
        let d = cov.nrows();
        (mu.to_vec(), DMatrix::from_fn(d, d, |i, j| cov[[i, j]]))
    };
    let (m1, c1) = stats(a);
    let (m2, c2) = stats(b);
    let e = c1.clone().symmetric_eigen();
    let root = &e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt())) * e.eigenvectors.transpose();
    let inner = &root * &c2 * &root;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = inner.symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let mean: f64 = m1.iter().zip(&m2).map(|(x, y)| (x - y).powi(2)).sum();
    mean + c1.trace() + c2.trace() - 2.0 * tr_sqrt
}

#[test]
fn fid_matches_the_symmetric_square_root_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let a = gaussian(300, 5, &mut rng);
        let mix = gaussian(5, 5, &mut rng);
        let b = gaussian(300, 5, &mut rng).dot(&mix).mapv(|x| x * 0.7 + 0.3);
        let got = fid(&a, &b).unwrap();
        assert!(!got.divergent);
        let want = brute_force_fid(&a, &b);
        assert!((got.value - want).abs() < 1e-6 * want.max(1.0), "{} vs {want}", got.value);
    }
}

#[test]
fn random_embeddings_give_harmonic_mrr() {
    let n = 50;
    let pairs: Vec<_> = (0..n).map(|i| (i, i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mrrs: Vec<f64> = (0..200)
        .map(|_| {
            let a = gaussian(n, 8, &mut rng);
            let b = gaussian(n, 8, &mut rng);
            evaluate_alignment(&a, &b, &pairs).unwrap().mrr
        })
        .collect();
    let expected = harmonic(n) / n as f64;
    assert!((mean(&mrrs) - expected).abs() < 0.006, "{} vs {expected}", mean(&mrrs));
}

#[test]
fn shipped_configs_match_the_presets() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in PRESETS {
        let file = TrainConfig::from_json_file(&dir.join(format!("{name}.json"))).unwrap();
        assert_eq!(Some(file), TrainConfig::preset(name), "{name}");
    }
}

#[test]
fn ratio_sweep_writes_one_row_per_metric() {
    let ds = tiny_dataset(30, 6);
    assert_eq!(subsample_seeds(&ds, 1.0, 0).unwrap(), ds);
    let half = subsample_seeds(&ds, 0.5, 0).unwrap();
    assert!(half.seed_alignments.iter().all(|p| ds.seed_alignments.contains(p)));
    let cfg = TrainConfig { epochs: 2, ..tiny_config() };
    let results = sweep_training_ratio(&ds, &[0.5, 1.0], &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ratio.csv");
    write_ratio_csv(&path, &results).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("ratio,metric,value"));
    let rows: Vec<_> = lines.collect();
    let metrics: HashSet<_> = rows.iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(rows.len(), 2 * metrics.len());
}
