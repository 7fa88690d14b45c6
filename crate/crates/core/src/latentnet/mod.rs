//! Convolutional variational autoencoder with an attached drag regressor.
//!
//! Everything is generic over the float type: training runs in `f32`, the
//! gradient checks in `f64`.

mod checkpoint;
mod layers;
mod model;
mod train;

use std::fmt::Debug;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use thiserror::Error;

use crate::shapegen::{BinaryImage, GrayImage, IMAGE_HEIGHT, IMAGE_WIDTH};

pub use checkpoint::{load_checkpoint, read_checkpoint, read_tensors, save_checkpoint, write_checkpoint};
pub use layers::ConvShape;
pub use model::{loss_and_grads, Batch, Grads, LossParts, Objective};
pub use train::{
    encode_means, train, AdamState, EpochMetrics, TrainConfig, TrainMode, TrainingMetrics, TrainingSet,
};

/// Float type the network runs in.
pub trait Scalar:
    faer::traits::ComplexField + num_traits::Float + Default + Send + Sync + Debug + 'static + std::ops::AddAssign
{
    fn of(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).unwrap()
    }

    fn to_f64(self) -> f64 {
        <Self as num_traits::ToPrimitive>::to_f64(&self).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatentError {
    #[error("{what}: expected {expected} values, got {got}")]
    ShapeMismatch { what: String, expected: usize, got: usize },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("dataset has {n} items, fewer than one batch of {batch}")]
    DatasetTooSmall { n: usize, batch: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<(), LatentError> {
    if expected == got {
        Ok(())
    } else {
        Err(LatentError::ShapeMismatch { what: what.into(), expected, got })
    }
}

/// Layer sizes. Image sides must be multiples of four; both convolutions
/// use stride 2 and "same" padding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub width: usize,
    pub height: usize,
    pub c1: usize,
    pub c2: usize,
    pub kernel: usize,
    pub dense_units: usize,
    pub dn_units: usize,
    pub latent_dim: usize,
    /// Bound on `|logvar|`.
    pub logvar_clamp: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            width: IMAGE_WIDTH,
            height: IMAGE_HEIGHT,
            c1: 16,
            c2: 32,
            kernel: 5,
            dense_units: 256,
            dn_units: 64,
            latent_dim: 20,
            logvar_clamp: LOGVAR_CLAMP,
        }
    }
}

impl NetConfig {
    pub fn with_latent_dim(latent_dim: usize) -> Self {
        Self { latent_dim, ..Self::default() }
    }

    /// Same layer structure with every dense layer twice as wide.
    pub fn doubled(&self) -> Self {
        Self { dense_units: 2 * self.dense_units, dn_units: 2 * self.dn_units, ..*self }
    }

    pub fn validate(&self) -> Result<(), LatentError> {
        let ok = self.width % 4 == 0
            && self.height % 4 == 0
            && self.width > 0
            && self.height > 0
            && self.kernel % 2 == 1
            && self.logvar_clamp > 0.0
            && [self.c1, self.c2, self.dense_units, self.dn_units, self.latent_dim].iter().all(|&n| n > 0);
        if ok {
            Ok(())
        } else {
            Err(LatentError::Config(format!("{self:?}")))
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn conv1(&self) -> ConvShape {
        ConvShape { c_in: 1, c_out: self.c1, h_in: self.height, w_in: self.width, kernel: self.kernel, stride: 2, pad: self.kernel / 2 }
    }

    pub fn conv2(&self) -> ConvShape {
        ConvShape {
            c_in: self.c1,
            c_out: self.c2,
            h_in: self.height / 2,
            w_in: self.width / 2,
            kernel: self.kernel,
            stride: 2,
            pad: self.kernel / 2,
        }
    }

    /// Length of the flattened feature map between the convolutional and
    /// dense parts.
    pub fn flat(&self) -> usize {
        self.c2 * (self.height / 4) * (self.width / 4)
    }

    /// Tensor names and shapes in storage order.
    pub fn layer_table(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (k, d, u, f, m) = (self.kernel, self.latent_dim, self.dense_units, self.flat(), self.dn_units);
        vec![
            ("enc.conv1.w", vec![self.c1, 1, k, k]),
            ("enc.conv1.b", vec![self.c1]),
            ("enc.conv2.w", vec![self.c2, self.c1, k, k]),
            ("enc.conv2.b", vec![self.c2]),
            ("enc.fc1.w", vec![u, f]),
            ("enc.fc1.b", vec![u]),
            ("enc.fc2.w", vec![2 * d, u]),
            ("enc.fc2.b", vec![2 * d]),
            ("dec.fc1.w", vec![u, d]),
            ("dec.fc1.b", vec![u]),
            ("dec.fc2.w", vec![f, u]),
            ("dec.fc2.b", vec![f]),
            ("dec.tconv1.w", vec![self.c2, self.c1, k, k]),
            ("dec.tconv1.b", vec![self.c1]),
            ("dec.tconv2.w", vec![self.c1, 1, k, k]),
            ("dec.tconv2.b", vec![1]),
            ("dn.fc1.w", vec![m, d]),
            ("dn.fc1.b", vec![m]),
            ("dn.fc2.w", vec![m, m]),
            ("dn.fc2.b", vec![m]),
            ("dn.fc3.w", vec![1, m]),
            ("dn.fc3.b", vec![1]),
        ]
    }
}

/// Index ranges of the three parameter groups.
pub const ENCODER: std::ops::Range<usize> = 0..8;
pub const DECODER: std::ops::Range<usize> = 8..16;
pub const DRAG_NET: std::ops::Range<usize> = 16..22;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub config: NetConfig,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> NetworkParams<T> {
    pub fn zeros(config: NetConfig) -> Result<Self, LatentError> {
        config.validate()?;
        let tensors = config
            .layer_table()
            .into_iter()
            .map(|(name, shape)| Tensor { name: name.to_string(), data: vec![T::zero(); shape.iter().product()], shape })
            .collect();
        Ok(Self { config, tensors })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self, LatentError> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in p.tensors.iter_mut().filter(|t| t.shape.len() > 1) {
            let (fan_out, fan_in) = match t.shape.len() {
                2 => (t.shape[0], t.shape[1]),
                _ => {
                    let rf = t.shape[2] * t.shape[3];
                    (t.shape[0] * rf, t.shape[1] * rf)
                }
            };
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new(-a, a).expect("valid range");
            for v in &mut t.data {
                *v = T::of(dist.sample(&mut rng));
            }
        }
        Ok(p)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub(crate) fn data(&self, k: usize) -> &[T] {
        &self.tensors[k].data
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            config: self.config,
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor { name: t.name.clone(), shape: t.shape.clone(), data: t.data.iter().map(|&v| U::of(v.to_f64())).collect() })
                .collect(),
        }
    }
}

/// Posterior mean and log-variance, `logvar` clamped to the configured
/// bound.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    pub mu: Vec<T>,
    pub logvar: Vec<T>,
}

/// Default bound on `|logvar|`.
pub const LOGVAR_CLAMP: f64 = 10.0;
/// Reconstruction probabilities are clamped to `[ε, 1 − ε]`.
pub const BCE_EPS: f64 = 1e-7;

pub fn encode<T: Scalar>(pixels: &[T], params: &NetworkParams<T>) -> Result<EncoderOutput<T>, LatentError> {
    check_len("image", params.config.pixels(), pixels.len())?;
    let out = model::encoder_forward(params, pixels, 1);
    let enc = EncoderOutput { mu: out.mu, logvar: out.logvar };
    if enc.mu.iter().chain(&enc.logvar).all(|v| v.is_finite()) {
        Ok(enc)
    } else {
        Err(LatentError::NonFinite("encoder output".into()))
    }
}

pub fn encode_binary(image: &BinaryImage, params: &NetworkParams<f32>) -> Result<EncoderOutput<f32>, LatentError> {
    let px: Vec<f32> = image.pixels().iter().map(|&p| p as f32).collect();
    encode(&px, params)
}

pub fn encode_gray(image: &GrayImage, params: &NetworkParams<f32>) -> Result<EncoderOutput<f32>, LatentError> {
    encode(image.pixels(), params)
}

/// `z = mu + exp(logvar / 2) ⊙ noise`.
pub fn reparameterize<T: Scalar>(enc: &EncoderOutput<T>, noise: &[T]) -> Result<Vec<T>, LatentError> {
    check_len("noise", enc.mu.len(), noise.len())?;
    let half = T::of(0.5);
    Ok(enc.mu.iter().zip(&enc.logvar).zip(noise).map(|((&m, &lv), &e)| m + (half * lv).exp() * e).collect())
}

/// Decoder output probabilities, row-major `height × width`.
pub fn decode<T: Scalar>(z: &[T], params: &NetworkParams<T>) -> Result<Vec<T>, LatentError> {
    check_len("latent vector", params.config.latent_dim, z.len())?;
    if !z.iter().all(|v| v.is_finite()) {
        return Err(LatentError::NonFinite("latent vector".into()));
    }
    Ok(model::decoder_forward(params, z, 1).recon)
}

/// Decoder probabilities for many latent vectors stored row after row.
pub fn decode_many<T: Scalar>(zs: &[T], params: &NetworkParams<T>) -> Result<Vec<T>, LatentError> {
    let d = params.config.latent_dim;
    if zs.len() % d != 0 {
        return Err(LatentError::ShapeMismatch { what: "latent batch".into(), expected: d, got: zs.len() % d });
    }
    if !zs.iter().all(|v| v.is_finite()) {
        return Err(LatentError::NonFinite("latent vectors".into()));
    }
    let mut out = Vec::with_capacity(zs.len() / d * params.config.pixels());
    for chunk in zs.chunks(64 * d) {
        out.extend(model::decoder_forward(params, chunk, chunk.len() / d).recon);
    }
    Ok(out)
}

/// Standardized drag predictions for many latent vectors.
pub fn dn_predict_many<T: Scalar>(zs: &[T], params: &NetworkParams<T>) -> Result<Vec<T>, LatentError> {
    let d = params.config.latent_dim;
    if zs.len() % d != 0 {
        return Err(LatentError::ShapeMismatch { what: "latent batch".into(), expected: d, got: zs.len() % d });
    }
    Ok(model::dn_forward(params, zs, zs.len() / d).y)
}

pub fn decode_image(z: &[f32], params: &NetworkParams<f32>) -> Result<GrayImage, LatentError> {
    let px = decode(z, params)?;
    GrayImage::new(px).map_err(|e| LatentError::Config(e.to_string()))
}

/// Standardized drag predicted from a latent vector.
pub fn dn_predict<T: Scalar>(z: &[T], params: &NetworkParams<T>) -> Result<T, LatentError> {
    check_len("latent vector", params.config.latent_dim, z.len())?;
    Ok(model::dn_forward(params, z, 1).y[0])
}

/// `(loss_recon, loss_kl)` for a batch: mean per-pixel binary
/// cross-entropy, and the Gaussian KL summed over latent dimensions and
/// averaged over the batch.
pub fn vae_loss(images: &[f64], recon: &[f64], encs: &[EncoderOutput<f64>]) -> Result<(f64, f64), LatentError> {
    check_len("reconstruction", images.len(), recon.len())?;
    if encs.is_empty() {
        return Err(LatentError::Config("empty batch".into()));
    }
    let mut bce = 0.0;
    for (&x, &r) in images.iter().zip(recon) {
        if !(0.0..=1.0).contains(&r) {
            return Err(LatentError::NonFinite(format!("reconstruction value {r}")));
        }
        let r = r.clamp(BCE_EPS, 1.0 - BCE_EPS);
        bce -= x * r.ln() + (1.0 - x) * (1.0 - r).ln();
    }
    let kl: f64 = encs.iter().map(kl_divergence).sum::<f64>() / encs.len() as f64;
    Ok((bce / images.len() as f64, kl))
}

/// KL divergence of one posterior from the standard normal.
pub fn kl_divergence(enc: &EncoderOutput<f64>) -> f64 {
    0.5 * enc.mu.iter().zip(&enc.logvar).map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv).sum::<f64>()
}

/// Unweighted sum of the three loss terms.
pub fn joint_loss(loss_recon: f64, loss_kl: f64, loss_dn: f64) -> f64 {
    (loss_recon + loss_kl) + loss_dn
}
