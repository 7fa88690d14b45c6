//! Expected improvement over a GP posterior, multi-start gradient ascent
//! and candidate selection.

use std::fs;
use std::path::Path;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use libm::erfc;
use thiserror::Error;

use crate::numfmt;
use crate::surrogate::{Prediction, SsgpModel, SurrogateError};

/// Below this posterior standard deviation EI uses its deterministic branch.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptError {
    #[error("negative variance {0}")]
    NegativeVariance(f64),
    #[error("f_best must be finite, got {0}")]
    NonFiniteBest(f64),
    #[error("no start points")]
    NoStarts,
    #[error("empty training set")]
    EmptyTraining,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error("candidate file: {0}")]
    Io(String),
}

/// Anything with a posterior mean and latent variance plus their
/// gradients.
pub trait Posterior: Sync {
    fn dim(&self) -> usize;
    fn predict_full(&self, z: &[f64]) -> Result<Prediction, SurrogateError>;
}

impl Posterior for SsgpModel {
    fn dim(&self) -> usize {
        self.basis().dim()
    }

    fn predict_full(&self, z: &[f64]) -> Result<Prediction, SurrogateError> {
        SsgpModel::predict_full(self, z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EIState {
    /// Smallest standardized drag in the training data.
    pub f_best: f64,
    pub xi: f64,
}

impl EIState {
    pub fn new(f_best: f64) -> Result<Self, OptError> {
        if !f_best.is_finite() {
            return Err(OptError::NonFiniteBest(f_best));
        }
        Ok(Self { f_best, xi: 0.0 })
    }
}

pub fn std_normal_cdf(u: f64) -> f64 {
    0.5 * erfc(-u / std::f64::consts::SQRT_2)
}

pub fn std_normal_pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Minimization-form EI of a Gaussian `N(mean, variance)` below
/// `f_best − xi`.
pub fn expected_improvement(mean: f64, variance: f64, state: &EIState) -> Result<f64, OptError> {
    if variance < 0.0 || variance.is_nan() {
        return Err(OptError::NegativeVariance(variance));
    }
    let delta = state.f_best - state.xi - mean;
    let sigma = variance.sqrt();
    if sigma < SIGMA_FLOOR {
        return Ok(delta.max(0.0));
    }
    let u = delta / sigma;
    Ok((delta * std_normal_cdf(u) + sigma * std_normal_pdf(u)).max(0.0))
}

/// EI and its gradient from one posterior evaluation.
pub fn ei_with_gradient(p: &Prediction, state: &EIState) -> Result<(f64, Vec<f64>), OptError> {
    let ei = expected_improvement(p.mean, p.variance, state)?;
    let delta = state.f_best - state.xi - p.mean;
    let sigma = p.variance.sqrt();
    let grad = if sigma < SIGMA_FLOOR {
        if delta > 0.0 {
            p.dmean.iter().map(|g| -g).collect()
        } else {
            vec![0.0; p.dmean.len()]
        }
    } else {
        let u = delta / sigma;
        let (cdf, pdf) = (std_normal_cdf(u), std_normal_pdf(u));
        p.dmean.iter().zip(&p.dvar).map(|(dm, dv)| -cdf * dm + pdf * dv / (2.0 * sigma)).collect()
    };
    Ok((ei, grad))
}

pub fn ei_gradient<P: Posterior + ?Sized>(model: &P, z: &[f64], state: &EIState) -> Result<Vec<f64>, OptError> {
    Ok(ei_with_gradient(&model.predict_full(z)?, state)?.1)
}

pub fn ei_at<P: Posterior + ?Sized>(model: &P, z: &[f64], state: &EIState) -> Result<f64, OptError> {
    let p = model.predict_full(z)?;
    expected_improvement(p.mean, p.variance, state)
}

/// Draws `count` starts `mu_i + exp(logvar_i / 2) ⊙ ε` with `i` uniform
/// over the training set.
pub fn sample_starts(mus: &[Vec<f64>], logvars: &[Vec<f64>], count: usize, seed: u64) -> Result<Vec<Vec<f64>>, OptError> {
    if mus.is_empty() {
        return Err(OptError::EmptyTraining);
    }
    if logvars.len() != mus.len() {
        return Err(OptError::Dimension { expected: mus.len(), got: logvars.len() });
    }
    let d = mus[0].len();
    for v in mus.iter().chain(logvars) {
        if v.len() != d {
            return Err(OptError::Dimension { expected: d, got: v.len() });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let i = rng.random_range(0..mus.len());
            mus[i]
                .iter()
                .zip(&logvars[i])
                .map(|(&m, &lv)| {
                    let e: f64 = rng.sample(StandardNormal);
                    m + (0.5 * lv).exp() * e
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscentConfig {
    pub initial_step: f64,
    pub growth: f64,
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Backtracking gives up below this step length.
    pub min_step: f64,
    pub workers: usize,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self { initial_step: 0.1, growth: 1.2, grad_tol: 1e-6, max_iters: 500, min_step: 1e-14, workers: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscentResult {
    pub start_index: usize,
    pub z_star: Vec<f64>,
    pub ei_star: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Steepest ascent on EI. Each iteration moves `step` along the unit
/// gradient direction; a move is accepted only if EI does not decrease,
/// otherwise the step is halved and retried.
pub fn ascend<P: Posterior + ?Sized>(model: &P, start: &[f64], state: &EIState, cfg: &AscentConfig) -> Result<AscentResult, OptError> {
    if start.len() != model.dim() {
        return Err(OptError::Dimension { expected: model.dim(), got: start.len() });
    }
    let mut z = start.to_vec();
    let (mut ei, mut g) = ei_with_gradient(&model.predict_full(&z)?, state)?;
    let mut step = cfg.initial_step;
    let mut iterations = 0;
    let mut stalled = false;
    while iterations < cfg.max_iters {
        let gn = norm(&g);
        if gn < cfg.grad_tol {
            break;
        }
        iterations += 1;
        loop {
            let cand: Vec<f64> = z.iter().zip(&g).map(|(a, b)| a + step * b / gn).collect();
            let p = model.predict_full(&cand)?;
            let (e2, g2) = ei_with_gradient(&p, state)?;
            if e2 >= ei && cand != z {
                z = cand;
                ei = e2;
                g = g2;
                step *= cfg.growth;
                break;
            }
            step *= 0.5;
            if step < cfg.min_step {
                stalled = true;
                break;
            }
        }
        if stalled {
            break;
        }
    }
    let grad_norm = norm(&g);
    Ok(AscentResult { start_index: 0, z_star: z, ei_star: ei, grad_norm, iterations, converged: grad_norm < cfg.grad_tol })
}

/// Runs [`ascend`] from every start, spread over `cfg.workers` threads.
/// Results are sorted by `ei_star` descending, ties by start index.
pub fn multistart_ascent<P: Posterior + ?Sized>(
    model: &P,
    starts: &[Vec<f64>],
    state: &EIState,
    cfg: &AscentConfig,
) -> Result<Vec<AscentResult>, OptError> {
    if starts.is_empty() {
        return Err(OptError::NoStarts);
    }
    let workers = cfg.workers.clamp(1, starts.len());
    let run = |i: usize| ascend(model, &starts[i], state, cfg).map(|r| AscentResult { start_index: i, ..r });
    let mut results: Vec<AscentResult> = if workers == 1 {
        (0..starts.len()).map(run).collect::<Result<_, _>>()?
    } else {
        thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let run = &run;
                    s.spawn(move || (w..starts.len()).step_by(workers).map(run).collect::<Result<Vec<_>, _>>())
                })
                .collect();
            let mut all = Vec::with_capacity(starts.len());
            for h in handles {
                all.extend(h.join().expect("ascent worker panicked")?);
            }
            Ok::<_, OptError>(all)
        })?
    };
    results.sort_by(|a, b| b.ei_star.total_cmp(&a.ei_star).then(a.start_index.cmp(&b.start_index)));
    Ok(results)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub ei: f64,
    pub z: Vec<f64>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Greedy pick in the given (descending EI) order, skipping points within
/// `dedup_radius` of an earlier pick.
pub fn select_candidates(results: &[AscentResult], k: usize, dedup_radius: f64) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = Vec::new();
    for r in results {
        if out.len() == k {
            break;
        }
        if dedup_radius > 0.0 && out.iter().any(|c| dist(&c.z, &r.z_star) < dedup_radius) {
            continue;
        }
        out.push(Candidate { ei: r.ei_star, z: r.z_star.clone() });
    }
    out
}

/// One line per candidate: `ei z_1 … z_d`, shortest round-trip decimals.
pub fn format_candidates(cands: &[Candidate]) -> String {
    let mut s = String::new();
    for c in cands {
        s.push_str(&numfmt::real(c.ei));
        for &v in &c.z {
            s.push(' ');
            s.push_str(&numfmt::real(v));
        }
        s.push('\n');
    }
    s
}

pub fn parse_candidates(text: &str) -> Result<Vec<Candidate>, OptError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| OptError::Io(format!("line {}: bad number {t:?}", n + 1))))
            .collect::<Result<_, _>>()?;
        if vals.len() < 2 {
            return Err(OptError::Io(format!("line {}: need ei and at least one coordinate", n + 1)));
        }
        if let Some(prev) = out.last().map(|c: &Candidate| c.z.len()) {
            if prev != vals.len() - 1 {
                return Err(OptError::Dimension { expected: prev, got: vals.len() - 1 });
            }
        }
        out.push(Candidate { ei: vals[0], z: vals[1..].to_vec() });
    }
    Ok(out)
}

pub fn write_candidates(path: &Path, cands: &[Candidate]) -> Result<(), OptError> {
    fs::write(path, format_candidates(cands)).map_err(|e| OptError::Io(format!("{}: {e}", path.display())))
}

pub fn read_candidates(path: &Path) -> Result<Vec<Candidate>, OptError> {
    let text = fs::read_to_string(path).map_err(|e| OptError::Io(format!("{}: {e}", path.display())))?;
    parse_candidates(&text)
}
