//! Sparse-spectrum Gaussian-process regression: Bayesian linear regression
//! on random Fourier features of a squared-exponential kernel.
//!
//! With `Φ` the `n × 2m` feature matrix (rows `φ(z_i)`, each of squared
//! norm `σ_f²`), the weights have posterior covariance
//! `Σ_w = σ_n² A⁻¹`, `A = ΦᵀΦ + σ_n² I`, and mean `A⁻¹ Φᵀ y`. Predictions
//! use this primal form when `n ≥ 2m` and the equivalent `n × n` dual form
//! `σ_n² A⁻¹ = I − Φᵀ (ΦΦᵀ + σ_n² I)⁻¹ Φ` otherwise.

mod hyper;

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_upper_triangular_in_place};
use faer::{Mat, MatRef, Par, Side};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::container::{self, Entry};

pub use hyper::{fit_hyperparameters, HyperSearch};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid hyperparameter: {0}")]
    Hyperparameter(String),
    #[error("no training data")]
    Empty,
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("model file: {0}")]
    Io(String),
}

/// Random frequencies `s_r = ε_r / (2π ℓ)` for an SE kernel with
/// per-dimension lengthscales.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    m: usize,
    d: usize,
    /// `m × d`, row-major.
    s: Vec<f64>,
    lengthscales: Vec<f64>,
    sigma_f: f64,
    seed: u64,
}

pub fn build_basis(m: usize, lengthscales: &[f64], sigma_f: f64, seed: u64) -> Result<SpectralBasis, SurrogateError> {
    if m == 0 || lengthscales.is_empty() {
        return Err(SurrogateError::Hyperparameter("m and d must be positive".into()));
    }
    if !(sigma_f > 0.0 && sigma_f.is_finite()) || lengthscales.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(SurrogateError::Hyperparameter(format!("sigma_f={sigma_f}, lengthscales={lengthscales:?}")));
    }
    let d = lengthscales.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Vec::with_capacity(m * d);
    for _ in 0..m {
        for &l in lengthscales {
            let e: f64 = StandardNormal.sample(&mut rng);
            s.push(e / (2.0 * PI * l));
        }
    }
    Ok(SpectralBasis { m, d, s, lengthscales: lengthscales.to_vec(), sigma_f, seed })
}

impl SpectralBasis {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.s
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn sigma_f(&self) -> f64 {
        self.sigma_f
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn scale(&self) -> f64 {
        self.sigma_f / (self.m as f64).sqrt()
    }

    fn check(&self, z: &[f64]) -> Result<(), SurrogateError> {
        if z.len() != self.d {
            return Err(SurrogateError::Dimension { expected: self.d, got: z.len() });
        }
        Ok(())
    }

    /// Phases `θ_r = 2π s_r · z`.
    fn phases(&self, z: &[f64]) -> Vec<f64> {
        self.s.chunks_exact(self.d).map(|row| 2.0 * PI * row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()).collect()
    }

    fn features_from_phases(&self, theta: &[f64], out: &mut [f64]) {
        let c = self.scale();
        for (r, &t) in theta.iter().enumerate() {
            let (sn, cs) = t.sin_cos();
            out[r] = c * cs;
            out[self.m + r] = c * sn;
        }
    }

    /// `Jᵀ g` where `J = dφ/dz` and `g` has length `2m`.
    fn jacobian_t(&self, theta: &[f64], g: &[f64]) -> Vec<f64> {
        let c = 2.0 * PI * self.scale();
        let mut out = vec![0.0; self.d];
        for (r, &t) in theta.iter().enumerate() {
            let (sn, cs) = t.sin_cos();
            let coef = c * (cs * g[self.m + r] - sn * g[r]);
            for (o, &sv) in out.iter_mut().zip(&self.s[r * self.d..(r + 1) * self.d]) {
                *o += coef * sv;
            }
        }
        out
    }
}

/// `φ(z) = (σ_f / √m) [cos(2π S z); sin(2π S z)]`.
pub fn feature_map(z: &[f64], basis: &SpectralBasis) -> Result<Vec<f64>, SurrogateError> {
    basis.check(z)?;
    let mut out = vec![0.0; 2 * basis.m];
    basis.features_from_phases(&basis.phases(z), &mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Form {
    Primal,
    Dual,
}

/// Posterior mean, latent-function variance and their gradients at one
/// point.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
    pub dmean: Vec<f64>,
    pub dvar: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SsgpModel {
    basis: SpectralBasis,
    sigma_n: f64,
    /// Training inputs `n × d` and labels, kept for the dual form and for
    /// serialization.
    z: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    /// Lower Cholesky factor of `A`.
    chol: Mat<f64>,
    form: Form,
    /// Dual form: feature matrix `n × 2m` and lower Cholesky factor of
    /// `ΦΦᵀ + σ_n² I`.
    phi: Mat<f64>,
    dual_chol: Mat<f64>,
    lml: f64,
}

fn cholesky(a: Mat<f64>, what: &str) -> Result<Mat<f64>, SurrogateError> {
    let llt = a.llt(Side::Lower).map_err(|e| SurrogateError::Factorization(format!("{what}: {e:?}")))?;
    Ok(llt.L().to_owned())
}

fn feature_matrix(z: &[f64], basis: &SpectralBasis) -> Mat<f64> {
    let n = z.len() / basis.d;
    let mut phi = Mat::<f64>::zeros(n, 2 * basis.m);
    let mut row = vec![0.0; 2 * basis.m];
    for i in 0..n {
        basis.features_from_phases(&basis.phases(&z[i * basis.d..(i + 1) * basis.d]), &mut row);
        for (j, &v) in row.iter().enumerate() {
            phi[(i, j)] = v;
        }
    }
    phi
}

fn col(v: &[f64]) -> Mat<f64> {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

fn lower_solve(l: MatRef<'_, f64>, rhs: &mut Mat<f64>) {
    solve_lower_triangular_in_place(l, rhs.as_mut(), Par::Seq);
}

fn upper_solve_t(l: MatRef<'_, f64>, rhs: &mut Mat<f64>) {
    solve_upper_triangular_in_place(l.transpose(), rhs.as_mut(), Par::Seq);
}

/// Conditions the feature-space linear model on `(Z, y)`. `z` is `n × d`
/// row-major.
pub fn fit(z: &[f64], y: &[f64], basis: &SpectralBasis, sigma_n: f64) -> Result<SsgpModel, SurrogateError> {
    let n = y.len();
    if n == 0 {
        return Err(SurrogateError::Empty);
    }
    if z.len() != n * basis.d {
        return Err(SurrogateError::Dimension { expected: n * basis.d, got: z.len() });
    }
    if !(sigma_n > 0.0 && sigma_n.is_finite()) {
        return Err(SurrogateError::Hyperparameter(format!("sigma_n={sigma_n}")));
    }
    if y.iter().chain(z).any(|v| !v.is_finite()) {
        return Err(SurrogateError::NonFinite("training data".into()));
    }
    let m2 = 2 * basis.m;
    let s2 = sigma_n * sigma_n;
    let phi = feature_matrix(z, basis);
    let mut a = phi.transpose() * &phi;
    for i in 0..m2 {
        a[(i, i)] += s2;
    }
    let chol = cholesky(a, "feature-space system")?;
    let yc = col(y);
    let pty = phi.transpose() * &yc;
    let mut w = pty.clone();
    lower_solve(chol.as_ref(), &mut w);
    upper_solve_t(chol.as_ref(), &mut w);

    // log evidence: y ~ N(0, ΦΦᵀ + σ_n² I).
    let logdet_a: f64 = (0..m2).map(|i| 2.0 * chol[(i, i)].ln()).sum();
    let logdet = logdet_a + (n as f64 - m2 as f64) * s2.ln();
    let yty: f64 = y.iter().map(|v| v * v).sum();
    let fit_term: f64 = (0..m2).map(|i| pty[(i, 0)] * w[(i, 0)]).sum();
    let quad = (yty - fit_term) / s2;
    let lml = -0.5 * quad - 0.5 * logdet - 0.5 * n as f64 * (2.0 * PI).ln();

    let form = if n < m2 { Form::Dual } else { Form::Primal };
    let dual_chol = if form == Form::Dual {
        let mut k = &phi * phi.transpose();
        for i in 0..n {
            k[(i, i)] += s2;
        }
        cholesky(k, "dual system")?
    } else {
        Mat::zeros(0, 0)
    };
    let w: Vec<f64> = (0..m2).map(|i| w[(i, 0)]).collect();
    if w.iter().any(|v| !v.is_finite()) || !lml.is_finite() {
        return Err(SurrogateError::Factorization("non-finite posterior; the system is ill-conditioned".into()));
    }
    Ok(SsgpModel {
        basis: basis.clone(),
        sigma_n,
        z: z.to_vec(),
        y: y.to_vec(),
        w,
        chol,
        form,
        phi: if form == Form::Dual { phi } else { Mat::zeros(0, 0) },
        dual_chol,
        lml,
    })
}

/// Exact log evidence of the Bayesian linear model in feature space.
pub fn log_marginal_likelihood(z: &[f64], y: &[f64], basis: &SpectralBasis, sigma_n: f64) -> Result<f64, SurrogateError> {
    Ok(fit(z, y, basis, sigma_n)?.lml)
}

impl SsgpModel {
    pub fn basis(&self) -> &SpectralBasis {
        &self.basis
    }

    pub fn sigma_n(&self) -> f64 {
        self.sigma_n
    }

    pub fn n_train(&self) -> usize {
        self.y.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }

    /// `σ_n² A⁻¹ φ`, the posterior covariance applied to a feature vector.
    fn cov_times(&self, phi: &[f64]) -> Vec<f64> {
        match self.form {
            Form::Primal => {
                let mut v = col(phi);
                lower_solve(self.chol.as_ref(), &mut v);
                upper_solve_t(self.chol.as_ref(), &mut v);
                let s2 = self.sigma_n * self.sigma_n;
                (0..phi.len()).map(|i| s2 * v[(i, 0)]).collect()
            }
            Form::Dual => {
                let mut k = &self.phi * col(phi);
                lower_solve(self.dual_chol.as_ref(), &mut k);
                upper_solve_t(self.dual_chol.as_ref(), &mut k);
                let beta = self.phi.transpose() * &k;
                phi.iter().enumerate().map(|(i, &p)| p - beta[(i, 0)]).collect()
            }
        }
    }

    fn evaluate(&self, z: &[f64], grads: bool) -> Result<Prediction, SurrogateError> {
        self.basis.check(z)?;
        let theta = self.basis.phases(z);
        let mut phi = vec![0.0; 2 * self.basis.m];
        self.basis.features_from_phases(&theta, &mut phi);
        let mean: f64 = phi.iter().zip(&self.w).map(|(a, b)| a * b).sum();
        let cphi = self.cov_times(&phi);
        let variance = phi.iter().zip(&cphi).map(|(a, b)| a * b).sum::<f64>().max(0.0);
        let (dmean, dvar) = if grads {
            let dm = self.basis.jacobian_t(&theta, &self.w);
            let dv = self.basis.jacobian_t(&theta, &cphi).into_iter().map(|v| 2.0 * v).collect();
            (dm, dv)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(Prediction { mean, variance, dmean, dvar })
    }

    /// `(mean, latent-function variance)`.
    pub fn predict(&self, z: &[f64]) -> Result<(f64, f64), SurrogateError> {
        let p = self.evaluate(z, false)?;
        Ok((p.mean, p.variance))
    }

    /// `(dmean/dz, dvar/dz)`.
    pub fn predict_grad(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>), SurrogateError> {
        let p = self.evaluate(z, true)?;
        Ok((p.dmean, p.dvar))
    }

    /// Mean, variance and both gradients in one pass.
    pub fn predict_full(&self, z: &[f64]) -> Result<Prediction, SurrogateError> {
        self.evaluate(z, true)
    }

    /// Named tensors: `S`, `lengthscales`, `sigma_f`, `sigma_n`, `w`, the
    /// covariance factor, plus the training set and basis seed needed to
    /// rebuild the dual form.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (m, d, n) = (self.basis.m, self.basis.d, self.y.len());
        let m2 = 2 * m;
        let mut factor = Vec::with_capacity(m2 * m2);
        for i in 0..m2 {
            for j in 0..m2 {
                factor.push(if j <= i { self.chol[(i, j)] } else { 0.0 });
            }
        }
        container::encode(&[
            Entry::f64("S", vec![m, d], self.basis.s.clone()),
            Entry::f64("lengthscales", vec![d], self.basis.lengthscales.clone()),
            Entry::f64("sigma_f", vec![1], vec![self.basis.sigma_f]),
            Entry::f64("sigma_n", vec![1], vec![self.sigma_n]),
            Entry::f64("w", vec![m2], self.w.clone()),
            Entry::f64("cov_factor", vec![m2, m2], factor),
            Entry::f64("seed", vec![1], vec![self.basis.seed as f64]),
            Entry::f64("train_z", vec![n, d], self.z.clone()),
            Entry::f64("train_y", vec![n], self.y.clone()),
        ])
    }

    /// Rebuilds a model and checks that refitting reproduces the stored
    /// weights and factor bit for bit.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SurrogateError> {
        let io = |e: container::ContainerError| SurrogateError::Io(e.0);
        let entries = container::decode(bytes).map_err(io)?;
        let get = |name: &str| -> Result<(Vec<usize>, Vec<f64>), SurrogateError> {
            let e = container::find(&entries, name).map_err(io)?;
            Ok((e.shape.clone(), e.as_f64().map_err(io)?.to_vec()))
        };
        let (sshape, s) = get("S")?;
        let (_, lengthscales) = get("lengthscales")?;
        let sigma_f = get("sigma_f")?.1[0];
        let sigma_n = get("sigma_n")?.1[0];
        let seed = get("seed")?.1[0] as u64;
        let (_, z) = get("train_z")?;
        let (_, y) = get("train_y")?;
        if sshape.len() != 2 || sshape[1] != lengthscales.len() {
            return Err(SurrogateError::Io("S shape does not match lengthscales".into()));
        }
        let basis = SpectralBasis { m: sshape[0], d: sshape[1], s, lengthscales, sigma_f, seed };
        let model = fit(&z, &y, &basis, sigma_n)?;
        if model.w != get("w")?.1 || model.to_bytes() != bytes {
            return Err(SurrogateError::Io("stored posterior does not match a refit".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), SurrogateError> {
        fs::write(path, self.to_bytes()).map_err(|e| SurrogateError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, SurrogateError> {
        let bytes = fs::read(path).map_err(|e| SurrogateError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    #[cfg(test)]
    fn with_form(mut self, form: Form) -> Self {
        if form == Form::Dual && self.form == Form::Primal {
            let phi = feature_matrix(&self.z, &self.basis);
            let mut k = &phi * phi.transpose();
            for i in 0..self.y.len() {
                k[(i, i)] += self.sigma_n * self.sigma_n;
            }
            self.dual_chol = cholesky(k, "dual").unwrap();
            self.phi = phi;
        }
        self.form = form;
        self
    }
}
