use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::shapegen::{IMAGE_HEIGHT, IMAGE_WIDTH};

use super::model::{drag_only_step, encoder_forward, loss_and_grads, Batch, Grads, LossParts, Objective};
use super::{LatentError, NetConfig, NetworkParams, Scalar, DECODER, DRAG_NET, ENCODER};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Autoencoder and drag net optimized together on the summed loss.
    Joint,
    /// Autoencoder first; then the drag net on a frozen encoder.
    Separate,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Joint => "joint",
            TrainMode::Separate => "separate",
        })
    }
}

impl FromStr for TrainMode {
    type Err = LatentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint" => Ok(TrainMode::Joint),
            "separate" => Ok(TrainMode::Separate),
            _ => Err(LatentError::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub dense_units: usize,
    pub dn_units: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs of the joint run, or of each stage in separate mode.
    pub epochs: usize,
    pub mode: TrainMode,
    pub seed: u64,
    /// Bound on `|logvar|`.
    pub kl_clamp: f64,
    /// Factor on the KL term inside the optimized objective. The default
    /// `1 / pixels` matches a cross-entropy summed over pixels; a factor of
    /// 1 against the per-pixel mean collapses the posterior.
    pub kl_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 20,
            dense_units: 256,
            dn_units: 64,
            batch_size: 64,
            learning_rate: 1e-3,
            epochs: 200,
            mode: TrainMode::Joint,
            seed: 0,
            kl_clamp: 10.0,
            kl_weight: 1.0 / (IMAGE_WIDTH * IMAGE_HEIGHT) as f64,
        }
    }
}

impl TrainConfig {
    pub fn net(&self) -> NetConfig {
        NetConfig {
            latent_dim: self.latent_dim,
            dense_units: self.dense_units,
            dn_units: self.dn_units,
            logvar_clamp: self.kl_clamp,
            ..NetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), LatentError> {
        let ok = self.batch_size > 0
            && self.epochs > 0
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.kl_clamp > 0.0
            && self.kl_weight >= 0.0
            && self.kl_weight.is_finite();
        if !ok {
            return Err(LatentError::Config(format!("{self:?}")));
        }
        self.net().validate()
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), LatentError> {
        fn p<V: FromStr>(key: &str, value: &str) -> Result<V, LatentError> {
            value.parse().map_err(|_| LatentError::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "latent_dim" => self.latent_dim = p(key, value)?,
            "dense_units" => self.dense_units = p(key, value)?,
            "dn_units" => self.dn_units = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "learning_rate" => self.learning_rate = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "mode" => self.mode = value.parse()?,
            "seed" => self.seed = p(key, value)?,
            "kl_clamp" => self.kl_clamp = p(key, value)?,
            "kl_weight" => self.kl_weight = p(key, value)?,
            _ => return Err(LatentError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, LatentError> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LatentError::Config(format!("expected key=value, got {line:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "latent_dim={}\ndense_units={}\ndn_units={}\nbatch_size={}\nlearning_rate={:e}\nepochs={}\nmode={}\nseed={}\nkl_clamp={:e}\nkl_weight={:e}\n",
            self.latent_dim,
            self.dense_units,
            self.dn_units,
            self.batch_size,
            self.learning_rate,
            self.epochs,
            self.mode,
            self.seed,
            self.kl_clamp,
            self.kl_weight
        )
    }
}

/// Images and standardized labels, row-major `n × pixels`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub pixels: usize,
    pub images: Vec<f32>,
    pub labels: Vec<f32>,
}

impl TrainingSet {
    pub fn new(pixels: usize, images: Vec<f32>, labels: Vec<f32>) -> Result<Self, LatentError> {
        super::check_len("training images", labels.len() * pixels, images.len())?;
        Ok(Self { pixels, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.pixels..(i + 1) * self.pixels]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// 1 for the joint run and the autoencoder stage, 2 for the drag-net
    /// stage of separate training.
    pub stage: u8,
    pub loss_recon: f64,
    pub loss_kl: f64,
    pub loss_dn: f64,
    pub loss_vae: f64,
    pub loss_joint: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMetrics {
    pub mode: TrainMode,
    pub epochs: Vec<EpochMetrics>,
}

impl TrainingMetrics {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    /// Tab-separated table with a header row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tstage\tloss_recon\tloss_kl\tloss_dn\tloss_vae\tloss_joint\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{}\t{}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\n",
                e.epoch, e.stage, e.loss_recon, e.loss_kl, e.loss_dn, e.loss_vae, e.loss_joint
            ));
        }
        s
    }
}

/// Adaptive-moment optimizer state for a subset of tensors.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    lr: f64,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(params: &NetworkParams<T>, lr: f64) -> Self {
        let z: Vec<Vec<T>> = params.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect();
        Self { lr, t: 0, m: z.clone(), v: z }
    }

    /// One update of the tensors in `groups`; all others stay untouched.
    pub fn step(&mut self, params: &mut NetworkParams<T>, grads: &Grads<T>, groups: &[std::ops::Range<usize>]) {
        self.t += 1;
        let (b1, b2) = (T::of(Self::B1), T::of(Self::B2));
        let c1 = T::of(1.0 - Self::B1.powi(self.t));
        let c2 = T::of(1.0 - Self::B2.powi(self.t));
        let (lr, eps) = (T::of(self.lr), T::of(Self::EPS));
        for k in groups.iter().flat_map(|g| g.clone()) {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            let w = &mut params.tensors[k].data;
            for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *w = *w - lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

struct Stage {
    objective: Objective,
    groups: Vec<std::ops::Range<usize>>,
    stage: u8,
}

/// Trains from a seeded initialization. Identical inputs give bitwise
/// identical parameters and metrics.
pub fn train(set: &TrainingSet, cfg: &TrainConfig) -> Result<(NetworkParams<f32>, TrainingMetrics), LatentError> {
    cfg.validate()?;
    let net = cfg.net();
    super::check_len("pixels per image", net.pixels(), set.pixels)?;
    if set.len() < cfg.batch_size {
        return Err(LatentError::DatasetTooSmall { n: set.len(), batch: cfg.batch_size });
    }
    let mut params = NetworkParams::<f32>::init(net, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let stages = match cfg.mode {
        TrainMode::Joint => vec![Stage { objective: Objective::Joint, groups: vec![ENCODER, DECODER, DRAG_NET], stage: 1 }],
        TrainMode::Separate => vec![
            Stage { objective: Objective::Vae, groups: vec![ENCODER, DECODER], stage: 1 },
            Stage { objective: Objective::DragOnly, groups: vec![DRAG_NET], stage: 2 },
        ],
    };
    let mut metrics = TrainingMetrics { mode: cfg.mode, epochs: Vec::new() };
    let mut order: Vec<usize> = (0..set.len()).collect();
    let d = net.latent_dim;
    for stage in &stages {
        let mut adam = AdamState::new(&params, cfg.learning_rate);
        // The frozen encoder's posteriors are fixed for the whole stage.
        let frozen = match stage.objective {
            Objective::DragOnly => Some(encode_means(&params, &set.images)?),
            _ => None,
        };
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut sums = [0.0f64; 3];
            for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let b = chunk.len();
                let mut images = Vec::with_capacity(b * set.pixels);
                let mut labels = Vec::with_capacity(b);
                for &i in chunk {
                    images.extend_from_slice(set.image(i));
                    labels.push(set.labels[i]);
                }
                let noise: Vec<f32> = (0..b * d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let (loss, grads) = match &frozen {
                    Some((mus, lvs)) => {
                        let mu: Vec<f32> = chunk.iter().flat_map(|&i| mus[i].iter().copied()).collect();
                        let lv: Vec<f32> = chunk.iter().flat_map(|&i| lvs[i].iter().copied()).collect();
                        let (dn, g) = drag_only_step(&params, &mu, &lv, &labels, &noise);
                        // Reconstruction and KL cannot change while the
                        // autoencoder is frozen; carry the last measured values.
                        let last = metrics.last().copied().unwrap_or_default();
                        (LossParts { recon: last.loss_recon, kl: last.loss_kl, dn }, g)
                    }
                    None => {
                        let batch = Batch { size: b, images, labels, noise };
                        loss_and_grads(&params, &batch, stage.objective, cfg.kl_weight)
                    }
                };
                if !(loss.recon.is_finite() && loss.kl.is_finite() && loss.dn.is_finite()) {
                    return Err(LatentError::NonFiniteLoss { epoch, step });
                }
                adam.step(&mut params, &grads, &stage.groups);
                sums[0] += loss.recon * b as f64;
                sums[1] += loss.kl * b as f64;
                sums[2] += loss.dn * b as f64;
            }
            let n = set.len() as f64;
            let (recon, kl, dn) = (sums[0] / n, sums[1] / n, sums[2] / n);
            metrics.epochs.push(EpochMetrics {
                epoch,
                stage: stage.stage,
                loss_recon: recon,
                loss_kl: kl,
                loss_dn: dn,
                loss_vae: recon + kl,
                loss_joint: super::joint_loss(recon, kl, dn),
            });
        }
    }
    if !params.is_finite() {
        return Err(LatentError::NonFinite("trained parameters".into()));
    }
    Ok((params, metrics))
}

/// Posterior means and log-variances of many images, in batches.
pub fn encode_means<T: Scalar>(params: &NetworkParams<T>, images: &[T]) -> Result<(Vec<Vec<T>>, Vec<Vec<T>>), LatentError> {
    let px = params.config.pixels();
    if images.len() % px != 0 {
        return Err(LatentError::ShapeMismatch { what: "image batch".into(), expected: px, got: images.len() % px });
    }
    let d = params.config.latent_dim;
    let (mut mus, mut lvs) = (Vec::new(), Vec::new());
    for chunk in images.chunks(64 * px) {
        let b = chunk.len() / px;
        let e = encoder_forward(params, chunk, b);
        for i in 0..b {
            mus.push(e.mu[i * d..(i + 1) * d].to_vec());
            lvs.push(e.logvar[i * d..(i + 1) * d].to_vec());
        }
    }
    Ok((mus, lvs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapegen::{generate_shape, ShapeConfig};

    fn shapes(n: u64) -> TrainingSet {
        let cfg = ShapeConfig::default();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for s in 0..n {
            let g = generate_shape(s, &cfg).unwrap();
            images.extend(g.image.pixels().iter().map(|&p| p as f32));
            labels.push((s as f32 - n as f32 / 2.0) / n as f32);
        }
        TrainingSet::new(NetConfig::default().pixels(), images, labels).unwrap()
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = TrainConfig { mode: TrainMode::Separate, learning_rate: 3e-4, seed: 9, ..Default::default() };
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(TrainConfig::parse("nope=1").is_err());
        assert!(TrainConfig::parse("mode=both").is_err());
        assert!(TrainConfig::parse("batch_size=0").is_err());
    }

    #[test]
    fn too_small_dataset_is_rejected() {
        let set = shapes(3);
        let cfg = TrainConfig { batch_size: 4, epochs: 1, ..Default::default() };
        assert_eq!(train(&set, &cfg).unwrap_err(), LatentError::DatasetTooSmall { n: 3, batch: 4 });
    }

    #[test]
    fn training_is_deterministic_and_joint_loss_adds_up() {
        let set = shapes(6);
        let cfg = TrainConfig { batch_size: 4, epochs: 2, dense_units: 16, dn_units: 8, latent_dim: 4, ..Default::default() };
        let (p1, m1) = train(&set, &cfg).unwrap();
        let (p2, m2) = train(&set, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(m1, m2);
        for e in &m1.epochs {
            assert_eq!(e.loss_joint, e.loss_vae + e.loss_dn);
            assert!(e.loss_recon >= 0.0 && e.loss_kl >= 0.0 && e.loss_dn >= 0.0);
        }
    }

    #[test]
    fn separate_stage_two_leaves_autoencoder_untouched() {
        let set = shapes(6);
        let base = TrainConfig { batch_size: 4, epochs: 2, dense_units: 16, dn_units: 8, latent_dim: 4, mode: TrainMode::Separate, ..Default::default() };
        let (after, m) = train(&set, &base).unwrap();
        assert_eq!(m.epochs.iter().filter(|e| e.stage == 2).count(), 2);
        // Re-run only the first stage by hand and compare the autoencoder.
        let net = base.net();
        let mut p = NetworkParams::<f32>::init(net, base.seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
        rng.set_stream(1);
        let mut adam = AdamState::new(&p, base.learning_rate);
        let mut order: Vec<usize> = (0..set.len()).collect();
        for _ in 0..base.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(base.batch_size) {
                let b = chunk.len();
                let images = chunk.iter().flat_map(|&i| set.image(i).to_vec()).collect();
                let labels = chunk.iter().map(|&i| set.labels[i]).collect();
                let noise = (0..b * net.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let (_, g) = loss_and_grads(&p, &Batch { size: b, images, labels, noise }, Objective::Vae, base.kl_weight);
                adam.step(&mut p, &g, &[ENCODER, DECODER]);
            }
        }
        for k in ENCODER.start..DECODER.end {
            assert_eq!(after.tensors[k].data, p.tensors[k].data, "{}", p.tensors[k].name);
        }
        assert_ne!(after.tensors[DRAG_NET.start].data, p.tensors[DRAG_NET.start].data);
    }
}
