//! Alignment ranking metrics and synthesis quality metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::decoders::decode_modal;
use crate::encoder::{fuse, KgFeatures, KgShape, Modal};
use crate::error::{GeeaError, Result};
use crate::kgdata::{AlignmentDataset, Pair, Side};
use crate::losses::loss_prior_reconstruction;
use crate::mvae::{run_flows, sample_unconditional, FlowTag, NoiseMode};
use crate::training::{fit, Model, TrainConfig};

/// Ranking metrics of one query direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub hits_at_1: f64,
    pub hits_at_10: f64,
    pub mrr: f64,
    /// 1-based rank of the true counterpart per query, in test-pair order.
    pub ranks: Vec<usize>,
}

impl DirectionReport {
    pub fn from_ranks(ranks: Vec<usize>) -> Self {
        let n = ranks.len().max(1) as f64;
        let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        DirectionReport {
            hits_at_1: hits(1),
            hits_at_10: hits(10),
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            ranks,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Averages of the two directions, keyed by k.
    pub hits_at: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub source_to_target: DirectionReport,
    pub target_to_source: DirectionReport,
}

impl AlignmentReport {
    pub fn hits_at_1(&self) -> f64 {
        self.hits_at[&1]
    }

    pub fn hits_at_10(&self) -> f64 {
        self.hits_at[&10]
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12}{:>10}{:>10}{:>10}", "direction", "hits@1", "hits@10", "mrr");
        for (name, d) in [("x->y", &self.source_to_target), ("y->x", &self.target_to_source)] {
            let _ = writeln!(s, "{name:<12}{:>10.4}{:>10.4}{:>10.4}", d.hits_at_1, d.hits_at_10, d.mrr);
        }
        let _ = writeln!(
            s,
            "{:<12}{:>10.4}{:>10.4}{:>10.4}",
            "average",
            self.hits_at_1(),
            self.hits_at_10(),
            self.mrr
        );
        s
    }
}

fn normalized_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        row.mapv_inplace(|x| x / n);
    }
    out
}

/// Ranks of `truth[i]` among `candidate_ids` for each query row, by cosine
/// similarity. Equal scores rank the smaller entity id first.
pub fn rank_queries(queries: &Matrix, candidates: &Matrix, candidate_ids: &[usize], truth: &[usize]) -> Vec<usize> {
    let q = normalized_rows(queries);
    let c = normalized_rows(candidates);
    let sims = q.dot(&c.t());
    truth
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = sims.row(i);
            let ts = row[t];
            let tid = candidate_ids[t];
            1 + row
                .iter()
                .zip(candidate_ids)
                .filter(|&(&s, &id)| s > ts || (s == ts && id < tid))
                .count()
        })
        .collect()
}

fn direction(queries: &Matrix, candidates: &Matrix, pairs: &[(usize, usize)]) -> DirectionReport {
    let mut cand_ids: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    cand_ids.sort_unstable();
    cand_ids.dedup();
    let pos: BTreeMap<usize, usize> = cand_ids.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    let q_ids: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let truth: Vec<usize> = pairs.iter().map(|p| pos[&p.1]).collect();
    let q = queries.select(ndarray::Axis(0), &q_ids);
    let c = candidates.select(ndarray::Axis(0), &cand_ids);
    DirectionReport::from_ranks(rank_queries(&q, &c, &cand_ids, &truth))
}

/// Ranks the counterparts of `pairs` in both directions. Tables are indexed by
/// entity id; the candidates are the entities on the other side of `pairs`.
pub fn evaluate_alignment(source_joint: &Matrix, target_joint: &Matrix, pairs: &[Pair]) -> Result<AlignmentReport> {
    if pairs.is_empty() {
        return Err(GeeaError::Argument("no alignment pairs to evaluate".into()));
    }
    if let Some(&(x, y)) = pairs
        .iter()
        .find(|&&(x, y)| x >= source_joint.nrows() || y >= target_joint.nrows())
    {
        return Err(GeeaError::Argument(format!("pair ({x}, {y}) has no embedding")));
    }
    let forward = direction(source_joint, target_joint, pairs);
    let reversed: Vec<(usize, usize)> = pairs.iter().map(|&(x, y)| (y, x)).collect();
    let backward = direction(target_joint, source_joint, &reversed);
    let mut hits_at = BTreeMap::new();
    hits_at.insert(1, (forward.hits_at_1 + backward.hits_at_1) / 2.0);
    hits_at.insert(10, (forward.hits_at_10 + backward.hits_at_10) / 2.0);
    Ok(AlignmentReport {
        hits_at,
        mrr: (forward.mrr + backward.mrr) / 2.0,
        source_to_target: forward,
        target_to_source: backward,
    })
}

/// Alignment metrics of a model on `pairs`.
pub fn evaluate_model_alignment(model: &Model, features: &[KgFeatures; 2], pairs: &[Pair]) -> Result<AlignmentReport> {
    let src = model.embed_all(&features[0], Side::Source)?;
    let tgt = model.embed_all(&features[1], Side::Target)?;
    evaluate_alignment(&src.joint, &tgt.joint, pairs)
}

/// Fréchet distance between two Gaussian fits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidResult {
    pub value: f64,
    /// Set when the covariance product has no usable square root.
    pub divergent: bool,
}

/// Mean and unbiased covariance of the rows of `samples`.
pub fn gaussian_fit(samples: &Matrix) -> (Vec<f64>, DMatrix<f64>) {
    let n = samples.nrows();
    let d = samples.ncols();
    let mean = samples.mean_axis(ndarray::Axis(0)).unwrap_or_else(|| ndarray::Array1::zeros(d));
    let centered = samples - &mean;
    let denom = (n.max(2) - 1) as f64;
    let cov = centered.t().dot(&centered) / denom;
    (mean.to_vec(), DMatrix::from_fn(d, d, |i, j| cov[[i, j]]))
}

/// `‖μ₁−μ₂‖² + Tr(C₁ + C₂ − 2 (C₁C₂)^{1/2})`, with the trace of the square root
/// taken as the sum of square roots of the eigenvalues of `C₁C₂`.
pub fn fid_from_stats(mu1: &[f64], c1: &DMatrix<f64>, mu2: &[f64], c2: &DMatrix<f64>) -> FidResult {
    let finite = |m: &DMatrix<f64>| m.iter().all(|x| x.is_finite());
    if mu1.iter().chain(mu2).any(|x| !x.is_finite()) || !finite(c1) || !finite(c2) {
        return FidResult {
            value: f64::INFINITY,
            divergent: true,
        };
    }
    let c1 = (c1 + c1.transpose()) * 0.5;
    let c2 = (c2 + c2.transpose()) * 0.5;
    let mean_term: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b).powi(2)).sum();
    let product = &c1 * &c2;
    let scale = c1.trace().abs().max(c2.trace().abs()).max(1.0);
    let eig = product.complex_eigenvalues();
    let mut sqrt_trace = 0.0;
    let mut divergent = false;
    for e in eig.iter() {
        if !e.re.is_finite() || !e.im.is_finite() {
            divergent = true;
            continue;
        }
        if e.re < -1e-6 * scale * scale || e.im.abs() > 1e-6 * scale * scale {
            divergent = true;
        }
        sqrt_trace += e.re.max(0.0).sqrt();
    }
    if divergent {
        return FidResult {
            value: f64::INFINITY,
            divergent,
        };
    }
    let value = mean_term + c1.trace() + c2.trace() - 2.0 * sqrt_trace;
    FidResult {
        value: if value < 1e-6 { 0.0 } else { value },
        divergent: false,
    }
}

pub fn fid(generated: &Matrix, real: &Matrix) -> Result<FidResult> {
    if generated.ncols() != real.ncols() {
        return Err(GeeaError::Shape(format!(
            "FID feature widths differ: {} vs {}",
            generated.ncols(),
            real.ncols()
        )));
    }
    let (m1, c1) = gaussian_fit(generated);
    let (m2, c2) = gaussian_fit(real);
    Ok(fid_from_stats(&m1, &c1, &m2, &c2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    /// Prior reconstruction error ×10², modals weighted equally.
    pub pre: f64,
    /// Joint-embedding reconstruction error ×10².
    pub re: f64,
    pub fid: f64,
    pub fid_divergent: bool,
    /// Unscaled prior reconstruction error per modal.
    pub pre_by_modal: BTreeMap<Modal, f64>,
}

impl SynthesisReport {
    pub fn to_table(&self) -> String {
        let fid = if self.fid_divergent {
            "inf".to_string()
        } else {
            format!("{:.4}", self.fid)
        };
        format!(
            "{:<10}{:>12}\n{:<10}{:>12.4}\n{:<10}{:>12.4}\n{:<10}{:>12}\n",
            "metric", "value", "PRE(e-2)", self.pre, "RE(e-2)", self.re, "FID", fid
        )
    }
}

/// Synthesis metrics on the dangling pairs of `dataset`: the x→y flow with
/// ε = 0 is scored against the held-out target, and unconditional samples are
/// compared with the real target joint embeddings by FID.
pub fn evaluate_synthesis(model: &Model, dataset: &AlignmentDataset, rng: &mut impl Rng) -> Result<SynthesisReport> {
    if dataset.dangling_pairs.is_empty() {
        return Err(GeeaError::Argument("dataset has no dangling pairs".into()));
    }
    let source = KgFeatures::new(&dataset.source);
    let training_target = KgFeatures::new(&dataset.target);
    let full_target = KgFeatures::new(dataset.full_target());
    let xs: Vec<usize> = dataset.dangling_pairs.iter().map(|p| p.0).collect();
    let ys: Vec<usize> = dataset.dangling_pairs.iter().map(|p| p.1).collect();

    let x = model.embed(&source, Side::Source, &xs)?;
    let subs = [x.graph.clone(), x.attr.clone(), x.image.clone()];
    let flows = run_flows(
        &subs,
        Some(&subs),
        true,
        &[FlowTag::SourceToTarget],
        &model.mvae,
        &model.store,
        NoiseMode::Zero,
        rng,
    )?;
    let out = &flows[&FlowTag::SourceToTarget];
    let shape = KgShape::of(&full_target);
    let mut pre_by_modal = BTreeMap::new();
    for m in Modal::ALL {
        let pred = decode_modal(&out[m.index()].reconstruction, m, Side::Target, &shape, &model.decoder, &model.store)?;
        let truth = full_target.concrete(m, &ys);
        pre_by_modal.insert(m, loss_prior_reconstruction(&pred, &truth, m)?);
    }
    let pre = pre_by_modal.values().sum::<f64>() / 3.0 * 100.0;

    let refused = fuse(
        &out[0].reconstruction,
        &out[1].reconstruction,
        &out[2].reconstruction,
        &model.encoder,
        &model.store,
    )?;
    let truth = model.embed(&full_target, Side::Target, &ys)?.joint;
    let re = refused.iter().zip(truth.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / refused.len() as f64 * 100.0;

    let fid_result = unconditional_fid(model, &training_target, &dataset.dangling_targets(), rng)?;
    Ok(SynthesisReport {
        pre,
        re,
        fid: fid_result.value,
        fid_divergent: fid_result.divergent,
        pre_by_modal,
    })
}

/// FID between decoded-and-fused unconditional samples and the joint
/// embeddings of the target entities not in `excluded`. One sample is drawn
/// per real entity.
pub fn unconditional_fid(
    model: &Model,
    target: &KgFeatures,
    excluded: &std::collections::HashSet<usize>,
    rng: &mut impl Rng,
) -> Result<FidResult> {
    let real_ids: Vec<usize> = (0..target.entity_count()).filter(|e| !excluded.contains(e)).collect();
    let real = model.embed(target, Side::Target, &real_ids)?.joint;
    let samples = sample_unconditional(real_ids.len(), &model.mvae, &model.store, rng)?;
    let generated = fuse(&samples[0], &samples[1], &samples[2], &model.encoder, &model.store)?;
    fid(&generated, &real)
}

/// One row of a training-ratio sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioResult {
    pub ratio: f64,
    pub seed_pairs: usize,
    pub report: AlignmentReport,
}

/// Keeps a seeded random `ratio` share of the seed alignments. Ratio 1 keeps
/// the set unchanged.
pub fn subsample_seeds(dataset: &AlignmentDataset, ratio: f64, seed: u64) -> Result<AlignmentDataset> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(GeeaError::Argument(format!("training ratio {ratio} must lie in (0, 1]")));
    }
    let mut out = dataset.clone();
    if ratio < 1.0 {
        let keep = ((ratio * dataset.seed_alignments.len() as f64).round() as usize).max(1);
        let mut idx: Vec<usize> = (0..dataset.seed_alignments.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(keep);
        idx.sort_unstable();
        out.seed_alignments = idx.iter().map(|&i| dataset.seed_alignments[i]).collect();
    }
    Ok(out)
}

/// Trains and evaluates once per ratio of the seed alignments.
pub fn sweep_training_ratio(dataset: &AlignmentDataset, ratios: &[f64], config: &TrainConfig) -> Result<Vec<RatioResult>> {
    let mut results = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let ds = subsample_seeds(dataset, ratio, config.seed)?;
        log::info!("ratio {ratio}: {} seed pairs", ds.seed_alignments.len());
        let state = fit(&ds, config, |_, _| Ok(()))?;
        let features = crate::training::dataset_features(&ds);
        let report = evaluate_model_alignment(&state.model, &features, &ds.test_alignments)?;
        results.push(RatioResult {
            ratio,
            seed_pairs: ds.seed_alignments.len(),
            report,
        });
    }
    Ok(results)
}

/// CSV with one row per (ratio, metric).
pub fn write_ratio_csv(path: &Path, results: &[RatioResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["ratio", "metric", "value"])?;
    for r in results {
        for (metric, value) in [
            ("hits@1", r.report.hits_at_1()),
            ("hits@10", r.report.hits_at_10()),
            ("mrr", r.report.mrr),
        ] {
            w.write_record([r.ratio.to_string(), metric.to_string(), value.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
