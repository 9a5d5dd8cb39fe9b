//! Numerical checks of the Gaussian KL identities behind distribution
//! matching and of the ELBO decomposition on enumerable toy models.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GeeaError, Result};

/// Diagonal Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianStats {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(GeeaError::Shape(format!("{} means vs {} deviations", mu.len(), sigma.len())));
        }
        if sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(GeeaError::Argument("σ must be strictly positive".into()));
        }
        Ok(GaussianStats { mu, sigma })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianStats {
            mu: vec![0.0; dim],
            sigma: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        self.mu
            .iter()
            .zip(&self.sigma)
            .zip(z)
            .map(|((m, s), x)| -0.5 * ln2pi - s.ln() - (x - m).powi(2) / (2.0 * s * s))
            .sum()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.sigma)
            .map(|(&m, &s)| Normal::new(m, s).unwrap().sample(rng))
            .collect()
    }
}

/// `KL(p ‖ q) = Σ_d ln(σ_q/σ_p) + (σ_p² + (μ_p − μ_q)²) / (2σ_q²) − ½`.
pub fn gaussian_kl(p: &GaussianStats, q: &GaussianStats) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(GeeaError::Shape(format!("dimensions {} vs {}", p.dim(), q.dim())));
    }
    if p.sigma.iter().chain(&q.sigma).any(|&s| !(s > 0.0)) {
        return Err(GeeaError::Argument("σ must be strictly positive".into()));
    }
    Ok((0..p.dim())
        .map(|d| {
            let (m1, s1, m2, s2) = (p.mu[d], p.sigma[d], q.mu[d], q.sigma[d]);
            (s2 / s1).ln() + (s1 * s1 + (m1 - m2).powi(2)) / (2.0 * s2 * s2) - 0.5
        })
        .sum())
}

/// Sample estimate of `KL(p ‖ q) = E_p[log p − log q]`.
pub fn monte_carlo_kl(p: &GaussianStats, q: &GaussianStats, samples: usize, rng: &mut impl Rng) -> f64 {
    let total: f64 = (0..samples)
        .map(|_| {
            let z = p.sample(rng);
            p.log_density(&z) - q.log_density(&z)
        })
        .sum();
    total / samples as f64
}

/// Expanded form of `KL(z_x, z*) + KL(z_y, z*) − KL(z_x, z_y)` with
/// `z* = N(0, I)`, per dimension:
/// `−2 ln σ_y − ½ + [(μ_x² + μ_y² + σ_x²)(σ_y² − 1) + σ_y⁴ + 2 μ_x μ_y] / (2σ_y²)`.
pub fn anchor_difference(x: &GaussianStats, y: &GaussianStats) -> f64 {
    (0..x.dim())
        .map(|d| {
            let (mx, sx, my, sy) = (x.mu[d], x.sigma[d], y.mu[d], y.sigma[d]);
            let sy2 = sy * sy;
            -2.0 * sy.ln() - 0.5 + ((mx * mx + my * my + sx * sx) * (sy2 - 1.0) + sy2 * sy2 + 2.0 * mx * my) / (2.0 * sy2)
        })
        .sum()
}

fn random_gaussian(dim: usize, mu_range: f64, sigma: (f64, f64), rng: &mut impl Rng) -> GaussianStats {
    GaussianStats {
        mu: (0..dim).map(|_| rng.random_range(-mu_range..mu_range)).collect(),
        sigma: (0..dim).map(|_| rng.random_range(sigma.0..sigma.1)).collect(),
    }
}

/// Closed-form KL against a sample estimate on random pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub pairs: usize,
    pub samples: usize,
    pub max_relative_error: f64,
}

/// Compares closed-form and sampled KL on `pairs` random 2-D pairs. Pairs with
/// KL below 1 are redrawn, since a relative tolerance on a near-zero KL
/// measures sampling noise rather than the formula.
pub fn verify_kl_monte_carlo(pairs: usize, samples: usize, rng: &mut impl Rng) -> MonteCarloReport {
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < pairs {
        let p = random_gaussian(2, 2.0, (0.5, 2.0), rng);
        let q = random_gaussian(2, 2.0, (0.5, 2.0), rng);
        let exact = gaussian_kl(&p, &q).unwrap();
        if exact < 1.0 {
            continue;
        }
        let est = monte_carlo_kl(&p, &q, samples, rng);
        worst = worst.max((est - exact).abs() / exact);
        done += 1;
    }
    MonteCarloReport {
        pairs,
        samples,
        max_relative_error: worst,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposition2Report {
    pub trials: usize,
    /// Largest `|expanded − direct|` over the random trials.
    pub max_identity_residual: f64,
    /// `KL(z_x, z_y)` at each point of the interpolation path.
    pub path_kl: Vec<f64>,
    /// Sum of the two anchor KLs at each path point.
    pub path_anchor_kl: Vec<f64>,
    pub path_monotone: bool,
}

impl Proposition2Report {
    pub fn final_kl(&self) -> f64 {
        *self.path_kl.last().unwrap_or(&f64::NAN)
    }
}

/// Checks the anchor-difference identity on `trials` random Gaussian pairs and
/// follows a 10-step path that moves both Gaussians linearly onto `N(0, I)`.
pub fn verify_proposition2(trials: usize, rng: &mut impl Rng) -> Result<Proposition2Report> {
    if trials == 0 {
        return Err(GeeaError::Argument("trials must be at least 1".into()));
    }
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let dim = rng.random_range(1..=4);
        let x = random_gaussian(dim, 3.0, (0.1, 3.0), rng);
        let y = random_gaussian(dim, 3.0, (0.1, 3.0), rng);
        let star = GaussianStats::standard(dim);
        let direct = gaussian_kl(&x, &star)? + gaussian_kl(&y, &star)? - gaussian_kl(&x, &y)?;
        worst = worst.max((anchor_difference(&x, &y) - direct).abs());
    }

    let dim = 3;
    let x0 = random_gaussian(dim, 2.0, (0.3, 2.5), rng);
    let y0 = random_gaussian(dim, 2.0, (0.3, 2.5), rng);
    let star = GaussianStats::standard(dim);
    let steps = 10;
    let mut path_kl = Vec::with_capacity(steps + 1);
    let mut path_anchor_kl = Vec::with_capacity(steps + 1);
    for t in 0..=steps {
        let lambda = 1.0 - t as f64 / steps as f64;
        let at = |g: &GaussianStats| GaussianStats {
            mu: g.mu.iter().map(|m| m * lambda).collect(),
            sigma: g.sigma.iter().map(|s| 1.0 + (s - 1.0) * lambda).collect(),
        };
        let (x, y) = (at(&x0), at(&y0));
        path_kl.push(gaussian_kl(&x, &y)?);
        path_anchor_kl.push(gaussian_kl(&x, &star)? + gaussian_kl(&y, &star)?);
    }
    let path_monotone = path_kl.windows(2).all(|w| w[1] <= w[0]);
    Ok(Proposition2Report {
        trials,
        max_identity_residual: worst,
        path_kl,
        path_anchor_kl,
        path_monotone,
    })
}

/// Discrete joint `p(x, y)` with a softmax-parameterized `q_θ(y | x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    /// `joint[x][y]`, summing to one.
    pub joint: Vec<Vec<f64>>,
    /// Logits `θ[x][y]`.
    pub theta: Vec<Vec<f64>>,
}

/// Terms of the evidence decomposition for one `x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub log_evidence: f64,
    /// `E_q[log p(x | y)]`.
    pub reconstruction: f64,
    /// `KL(q(y | x) ‖ p(y))`.
    pub distribution_match: f64,
    /// `KL(q(y | x) ‖ p(y | x))`.
    pub prediction_match: f64,
}

impl ElboTerms {
    pub fn elbo(&self) -> f64 {
        self.reconstruction - self.distribution_match
    }

    pub fn residual(&self) -> f64 {
        (self.log_evidence - (self.reconstruction - self.distribution_match + self.prediction_match)).abs()
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl ToyModel {
    /// Random positive joint over `nx × ny` states and random logits.
    pub fn random(nx: usize, ny: usize, rng: &mut impl Rng) -> Result<Self> {
        if nx == 0 || ny == 0 || nx > 8 || ny > 8 {
            return Err(GeeaError::Argument("toy model sides must have 1 to 8 states".into()));
        }
        let raw: Vec<Vec<f64>> = (0..nx)
            .map(|_| (0..ny).map(|_| rng.random_range(0.05..1.0)).collect())
            .collect();
        let total: f64 = raw.iter().flatten().sum();
        let joint = raw.iter().map(|r| r.iter().map(|v| v / total).collect()).collect();
        let theta = (0..nx)
            .map(|_| (0..ny).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        Ok(ToyModel { joint, theta })
    }

    pub fn q(&self, x: usize) -> Vec<f64> {
        softmax(&self.theta[x])
    }

    fn marginal_y(&self) -> Vec<f64> {
        let ny = self.joint[0].len();
        (0..ny).map(|y| self.joint.iter().map(|r| r[y]).sum()).collect()
    }

    /// Sets `q(y | x)` to the true posterior `p(y | x)`.
    pub fn set_posterior(&mut self) {
        for (x, row) in self.joint.iter().enumerate() {
            self.theta[x] = row.iter().map(|p| p.ln()).collect();
        }
    }

    /// Every term by exhaustive summation over `y`.
    pub fn terms(&self, x: usize) -> ElboTerms {
        let py = self.marginal_y();
        let row = &self.joint[x];
        let px: f64 = row.iter().sum();
        let q = self.q(x);
        let mut rec = 0.0;
        let mut dm = 0.0;
        let mut pm = 0.0;
        for y in 0..row.len() {
            if q[y] == 0.0 {
                continue;
            }
            let p_x_given_y = row[y] / py[y];
            let p_y_given_x = row[y] / px;
            rec += q[y] * p_x_given_y.ln();
            dm += q[y] * (q[y] / py[y]).ln();
            pm += q[y] * (q[y] / p_y_given_x).ln();
        }
        ElboTerms {
            log_evidence: px.ln(),
            reconstruction: rec,
            distribution_match: dm,
            prediction_match: pm,
        }
    }

    /// Sum of the ELBO over all `x`.
    pub fn total_elbo(&self) -> f64 {
        (0..self.joint.len()).map(|x| self.terms(x).elbo()).sum()
    }

    pub fn total_prediction_kl(&self) -> f64 {
        (0..self.joint.len()).map(|x| self.terms(x).prediction_match).sum()
    }

    /// Gradient of the total ELBO with respect to `θ`:
    /// `∂/∂θ_xk = q_k (f_k − Σ_j q_j f_j)` with `f = log p(x, y) − log q(y | x)`.
    pub fn elbo_gradient(&self) -> Vec<Vec<f64>> {
        self.joint
            .iter()
            .enumerate()
            .map(|(x, row)| {
                let q = self.q(x);
                let f: Vec<f64> = row.iter().zip(&q).map(|(p, qk)| p.ln() - qk.ln()).collect();
                let mean: f64 = q.iter().zip(&f).map(|(a, b)| a * b).sum();
                q.iter().zip(&f).map(|(qk, fk)| qk * (fk - mean)).collect()
            })
            .collect()
    }

    /// One gradient-ascent step on the ELBO, halving the step until the ELBO
    /// does not decrease. Returns the step size taken, or 0 if none helped.
    pub fn ascend(&mut self, step: f64) -> f64 {
        let grad = self.elbo_gradient();
        let before = self.total_elbo();
        let mut lr = step;
        for _ in 0..40 {
            let mut trial = self.clone();
            for (row, grow) in trial.theta.iter_mut().zip(&grad) {
                for (t, g) in row.iter_mut().zip(grow) {
                    *t += lr * g;
                }
            }
            if trial.total_elbo() >= before {
                *self = trial;
                return lr;
            }
            lr *= 0.5;
        }
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub models: usize,
    /// Largest identity residual over every model and every `x`.
    pub max_identity_residual: f64,
    /// Prediction-matching KL when `q` equals the true posterior.
    pub posterior_prediction_kl: f64,
    /// Total prediction-matching KL before and after each ascent step.
    pub prediction_kl_trace: Vec<f64>,
    pub elbo_trace: Vec<f64>,
    pub monotone: bool,
}

/// Checks the decomposition on `models` random toy models, then runs `steps`
/// ELBO-ascent steps on one more and records the prediction-matching KL.
pub fn verify_elbo_decomposition(models: usize, steps: usize, rng: &mut impl Rng) -> Result<ElboReport> {
    let mut worst: f64 = 0.0;
    for _ in 0..models {
        let nx = rng.random_range(2..=8);
        let ny = rng.random_range(2..=8);
        let toy = ToyModel::random(nx, ny, rng)?;
        for x in 0..nx {
            worst = worst.max(toy.terms(x).residual());
        }
    }
    let mut toy = ToyModel::random(6, 5, rng)?;
    let mut exact = toy.clone();
    exact.set_posterior();
    let posterior_prediction_kl = exact.total_prediction_kl();

    let mut kl = vec![toy.total_prediction_kl()];
    let mut elbo = vec![toy.total_elbo()];
    for _ in 0..steps {
        toy.ascend(1.0);
        kl.push(toy.total_prediction_kl());
        elbo.push(toy.total_elbo());
    }
    let monotone = kl.windows(2).all(|w| w[1] <= w[0]);
    Ok(ElboReport {
        models,
        max_identity_residual: worst,
        posterior_prediction_kl,
        prediction_kl_trace: kl,
        elbo_trace: elbo,
        monotone,
    })
}

/// One line of the `verify-theory` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub check: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Runs every check with `trials` random trials each.
pub fn verify_all(trials: usize, rng: &mut impl Rng) -> Result<Vec<CheckRow>> {
    let row = |check: &str, value: f64, tolerance: f64, passed: bool| CheckRow {
        check: check.into(),
        value,
        tolerance,
        passed,
    };
    let mc = verify_kl_monte_carlo(20, 100_000, rng);
    let p2 = verify_proposition2(trials, rng)?;
    let elbo = verify_elbo_decomposition(trials, 100, rng)?;
    let kl_rise = elbo
        .prediction_kl_trace
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(vec![
        row("gaussian_kl vs monte carlo (rel)", mc.max_relative_error, 0.02, mc.max_relative_error < 0.02),
        row(
            "anchor difference identity",
            p2.max_identity_residual,
            1e-9,
            p2.max_identity_residual < 1e-9,
        ),
        row("path KL(zx, zy) final", p2.final_kl(), 1e-6, p2.final_kl() < 1e-6 && p2.path_monotone),
        row(
            "elbo decomposition identity",
            elbo.max_identity_residual,
            1e-9,
            elbo.max_identity_residual < 1e-9,
        ),
        row("prediction KL max rise under ascent", kl_rise, 0.0, elbo.monotone),
    ])
}

pub fn format_table(rows: &[CheckRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<40}{:>14}{:>12}  result", "check", "value", "tolerance");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<40}{:>14.3e}{:>12.1e}  {}",
            r.check,
            r.value,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    s
}
