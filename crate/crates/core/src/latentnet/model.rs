//! Batched forward and backward passes through encoder, decoder and drag
//! network.

use super::layers::{
    conv_backward, conv_forward, dense_backward, dense_forward, sigmoid, silu, silu_grad, tconv_backward, tconv_forward,
};
use super::{NetworkParams, Scalar, BCE_EPS, DECODER, DRAG_NET, ENCODER};

/// One gradient buffer per parameter tensor.
pub type Grads<T> = Vec<Vec<T>>;

/// Which loss terms are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Reconstruction, KL and drag regression, all parameters.
    Joint,
    /// Reconstruction and KL; encoder and decoder only.
    Vae,
    /// Drag regression on samples from a frozen encoder; drag net only.
    DragOnly,
}

/// Inputs of one optimization step.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub size: usize,
    /// `size × pixels`, values in `{0, 1}`.
    pub images: Vec<T>,
    /// Standardized drag labels.
    pub labels: Vec<T>,
    /// Standard-normal noise, `size × latent_dim`.
    pub noise: Vec<T>,
}

/// Batch-averaged loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub recon: f64,
    pub kl: f64,
    pub dn: f64,
}

fn act<T: Scalar>(pre: &[T]) -> Vec<T> {
    pre.iter().map(|&v| silu(v)).collect()
}

/// `d_pre = d_out ⊙ silu'(pre)`, in place on `d`.
fn act_back<T: Scalar>(pre: &[T], d: &mut [T]) {
    for (g, &v) in d.iter_mut().zip(pre) {
        *g = *g * silu_grad(v);
    }
}

pub(crate) struct EncCache<T> {
    cols1: Vec<T>,
    a1: Vec<T>,
    cols2: Vec<T>,
    a2: Vec<T>,
    h2: Vec<T>,
    a3: Vec<T>,
    h3: Vec<T>,
    raw_logvar: Vec<T>,
    pub mu: Vec<T>,
    pub logvar: Vec<T>,
}

pub(crate) fn encoder_forward<T: Scalar>(p: &NetworkParams<T>, x: &[T], b: usize) -> EncCache<T> {
    let c = &p.config;
    let (s1, s2) = (c.conv1(), c.conv2());
    let (f, u, d) = (c.flat(), c.dense_units, c.latent_dim);
    let mut a1 = vec![T::zero(); b * c.c1 * s1.h_out() * s1.w_out()];
    let cols1 = conv_forward(x, p.data(0), p.data(1), &s1, b, &mut a1);
    let h1 = act(&a1);
    let mut a2 = vec![T::zero(); b * f];
    let cols2 = conv_forward(&h1, p.data(2), p.data(3), &s2, b, &mut a2);
    let h2 = act(&a2);
    let mut a3 = vec![T::zero(); b * u];
    dense_forward(&h2, p.data(4), p.data(5), b, f, u, &mut a3);
    let h3 = act(&a3);
    let mut out = vec![T::zero(); b * 2 * d];
    dense_forward(&h3, p.data(6), p.data(7), b, u, 2 * d, &mut out);
    let clamp = T::of(c.logvar_clamp);
    let mut mu = Vec::with_capacity(b * d);
    let mut raw_logvar = Vec::with_capacity(b * d);
    for row in out.chunks_exact(2 * d) {
        mu.extend_from_slice(&row[..d]);
        raw_logvar.extend_from_slice(&row[d..]);
    }
    let logvar = raw_logvar.iter().map(|&v| v.max(-clamp).min(clamp)).collect();
    EncCache { cols1, a1, cols2, a2, h2, a3, h3, raw_logvar, mu, logvar }
}

/// Backpropagates `(d mu, d logvar)` into the encoder gradients.
fn encoder_backward<T: Scalar>(p: &NetworkParams<T>, e: &EncCache<T>, dmu: &[T], dlogvar: &[T], b: usize, g: &mut Grads<T>) {
    let c = &p.config;
    let (s1, s2) = (c.conv1(), c.conv2());
    let (f, u, d) = (c.flat(), c.dense_units, c.latent_dim);
    let clamp = T::of(c.logvar_clamp);
    let mut dout = vec![T::zero(); b * 2 * d];
    for i in 0..b {
        for j in 0..d {
            dout[i * 2 * d + j] = dmu[i * d + j];
            let raw = e.raw_logvar[i * d + j];
            dout[i * 2 * d + d + j] = if raw > -clamp && raw < clamp { dlogvar[i * d + j] } else { T::zero() };
        }
    }
    let (g6, g7) = pair(g, 6);
    let mut dh3 = vec![T::zero(); b * u];
    dense_backward(&e.h3, p.data(6), &dout, b, u, 2 * d, g6, g7, Some(&mut dh3));
    act_back(&e.a3, &mut dh3);
    let (g4, g5) = pair(g, 4);
    let mut dh2 = vec![T::zero(); b * f];
    dense_backward(&e.h2, p.data(4), &dh3, b, f, u, g4, g5, Some(&mut dh2));
    act_back(&e.a2, &mut dh2);
    let (g2, g3) = pair(g, 2);
    let mut dh1 = vec![T::zero(); e.a1.len()];
    conv_backward(&e.cols2, p.data(2), &dh2, &s2, b, g2, g3, Some(&mut dh1));
    act_back(&e.a1, &mut dh1);
    let (g0, g1) = pair(g, 0);
    conv_backward(&e.cols1, p.data(0), &dh1, &s1, b, g0, g1, None);
}

pub(crate) struct DecCache<T> {
    b1: Vec<T>,
    g1: Vec<T>,
    b2: Vec<T>,
    g2: Vec<T>,
    b3: Vec<T>,
    g3: Vec<T>,
    pub logits: Vec<T>,
    pub recon: Vec<T>,
}

pub(crate) fn decoder_forward<T: Scalar>(p: &NetworkParams<T>, z: &[T], b: usize) -> DecCache<T> {
    let c = &p.config;
    let (s1, s2) = (c.conv1(), c.conv2());
    let (f, u, d) = (c.flat(), c.dense_units, c.latent_dim);
    let mut b1 = vec![T::zero(); b * u];
    dense_forward(z, p.data(8), p.data(9), b, d, u, &mut b1);
    let g1 = act(&b1);
    let mut b2 = vec![T::zero(); b * f];
    dense_forward(&g1, p.data(10), p.data(11), b, u, f, &mut b2);
    let g2 = act(&b2);
    let mut b3 = vec![T::zero(); b * c.c1 * s2.h_in * s2.w_in];
    tconv_forward(&g2, p.data(12), p.data(13), &s2, b, &mut b3);
    let g3 = act(&b3);
    let mut logits = vec![T::zero(); b * c.pixels()];
    tconv_forward(&g3, p.data(14), p.data(15), &s1, b, &mut logits);
    let recon = logits.iter().map(|&v| sigmoid(v)).collect();
    DecCache { b1, g1, b2, g2, b3, g3, logits, recon }
}

/// Backpropagates the logit gradient; returns `d z`.
fn decoder_backward<T: Scalar>(p: &NetworkParams<T>, z: &[T], e: &DecCache<T>, dlogits: &[T], b: usize, g: &mut Grads<T>) -> Vec<T> {
    let c = &p.config;
    let (s1, s2) = (c.conv1(), c.conv2());
    let (f, u, d) = (c.flat(), c.dense_units, c.latent_dim);
    let (g14, g15) = pair(g, 14);
    let mut dg3 = vec![T::zero(); e.b3.len()];
    tconv_backward(&e.g3, p.data(14), dlogits, &s1, b, g14, g15, Some(&mut dg3));
    act_back(&e.b3, &mut dg3);
    let (g12, g13) = pair(g, 12);
    let mut dg2 = vec![T::zero(); b * f];
    tconv_backward(&e.g2, p.data(12), &dg3, &s2, b, g12, g13, Some(&mut dg2));
    act_back(&e.b2, &mut dg2);
    let (g10, g11) = pair(g, 10);
    let mut dg1 = vec![T::zero(); b * u];
    dense_backward(&e.g1, p.data(10), &dg2, b, u, f, g10, g11, Some(&mut dg1));
    act_back(&e.b1, &mut dg1);
    let (g8, g9) = pair(g, 8);
    let mut dz = vec![T::zero(); b * d];
    dense_backward(z, p.data(8), &dg1, b, d, u, g8, g9, Some(&mut dz));
    dz
}

pub(crate) struct DnCache<T> {
    t1: Vec<T>,
    t2: Vec<T>,
    pub y: Vec<T>,
}

pub(crate) fn dn_forward<T: Scalar>(p: &NetworkParams<T>, z: &[T], b: usize) -> DnCache<T> {
    let (d, m) = (p.config.latent_dim, p.config.dn_units);
    let mut t1 = vec![T::zero(); b * m];
    dense_forward(z, p.data(16), p.data(17), b, d, m, &mut t1);
    t1.iter_mut().for_each(|v| *v = v.tanh());
    let mut t2 = vec![T::zero(); b * m];
    dense_forward(&t1, p.data(18), p.data(19), b, m, m, &mut t2);
    t2.iter_mut().for_each(|v| *v = v.tanh());
    let mut y = vec![T::zero(); b];
    dense_forward(&t2, p.data(20), p.data(21), b, m, 1, &mut y);
    DnCache { t1, t2, y }
}

fn dn_backward<T: Scalar>(p: &NetworkParams<T>, z: &[T], e: &DnCache<T>, dy: &[T], b: usize, g: &mut Grads<T>) -> Vec<T> {
    let (d, m) = (p.config.latent_dim, p.config.dn_units);
    let tanh_back = |t: &[T], dt: &mut [T]| {
        for (g, &v) in dt.iter_mut().zip(t) {
            *g = *g * (T::one() - v * v);
        }
    };
    let (g20, g21) = pair(g, 20);
    let mut dt2 = vec![T::zero(); b * m];
    dense_backward(&e.t2, p.data(20), dy, b, m, 1, g20, g21, Some(&mut dt2));
    tanh_back(&e.t2, &mut dt2);
    let (g18, g19) = pair(g, 18);
    let mut dt1 = vec![T::zero(); b * m];
    dense_backward(&e.t1, p.data(18), &dt2, b, m, m, g18, g19, Some(&mut dt1));
    tanh_back(&e.t1, &mut dt1);
    let (g16, g17) = pair(g, 16);
    let mut dz = vec![T::zero(); b * d];
    dense_backward(z, p.data(16), &dt1, b, d, m, g16, g17, Some(&mut dz));
    dz
}

/// Mutable views of gradient tensors `k` and `k + 1`.
fn pair<T>(g: &mut Grads<T>, k: usize) -> (&mut [T], &mut [T]) {
    let (a, b) = g.split_at_mut(k + 1);
    (&mut a[k], &mut b[0])
}

pub fn zero_grads<T: Scalar>(p: &NetworkParams<T>) -> Grads<T> {
    p.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect()
}

/// Logit bound equivalent to clamping probabilities at `[ε, 1 − ε]`.
fn logit_bound() -> f64 {
    ((1.0 - BCE_EPS) / BCE_EPS).ln()
}

/// Mean per-pixel cross-entropy from logits, and its logit gradient
/// scaled by `weight`.
fn bce_from_logits<T: Scalar>(logits: &[T], x: &[T], weight: T) -> (f64, Vec<T>) {
    let bound = T::of(logit_bound());
    let n = T::of(logits.len() as f64);
    let mut total = 0.0f64;
    let mut grad = vec![T::zero(); logits.len()];
    for ((g, &l), &t) in grad.iter_mut().zip(logits).zip(x) {
        let lc = l.max(-bound).min(bound);
        let softplus = lc.max(T::zero()) + (T::one() + (-lc.abs()).exp()).ln();
        total += (softplus - t * lc).to_f64();
        if l > -bound && l < bound {
            *g = weight * (sigmoid(l) - t) / n;
        }
    }
    (total / logits.len() as f64, grad)
}

/// Mean squared error and its gradient with respect to `y`.
fn squared_error<T: Scalar>(y: &[T], labels: &[T]) -> (f64, Vec<T>) {
    let bt = T::of(y.len() as f64);
    let mut loss = 0.0;
    let dy = y
        .iter()
        .zip(labels)
        .map(|(&y, &t)| {
            let r = y - t;
            loss += r.to_f64() * r.to_f64();
            T::of(2.0) * r / bt
        })
        .collect();
    (loss / y.len() as f64, dy)
}

/// Drag-net loss and gradients for latents `mu + exp(logvar / 2) ⊙ noise`
/// of a frozen encoder; equals the `DragOnly` objective of
/// [`loss_and_grads`] without re-running encoder and decoder.
pub(crate) fn drag_only_step<T: Scalar>(p: &NetworkParams<T>, mu: &[T], logvar: &[T], labels: &[T], noise: &[T]) -> (f64, Grads<T>) {
    let b = labels.len();
    let half = T::of(0.5);
    let z: Vec<T> = (0..mu.len()).map(|k| mu[k] + (half * logvar[k]).exp() * noise[k]).collect();
    let dn = dn_forward(p, &z, b);
    let (loss, dy) = squared_error(&dn.y, labels);
    let mut g = zero_grads(p);
    dn_backward(p, &z, &dn, &dy, b, &mut g);
    (loss, g)
}

/// Loss terms and parameter gradients of `objective` on one batch. The KL
/// term enters the optimized objective with factor `kl_weight`; reported
/// loss terms are unweighted.
pub fn loss_and_grads<T: Scalar>(
    p: &NetworkParams<T>,
    batch: &Batch<T>,
    objective: Objective,
    kl_weight: f64,
) -> (LossParts, Grads<T>) {
    let c = &p.config;
    let (b, d) = (batch.size, c.latent_dim);
    let mut g = zero_grads(p);
    let enc = encoder_forward(p, &batch.images, b);
    let half = T::of(0.5);
    let sigma: Vec<T> = enc.logvar.iter().map(|&lv| (half * lv).exp()).collect();
    let z: Vec<T> = (0..b * d).map(|k| enc.mu[k] + sigma[k] * batch.noise[k]).collect();

    let mut kl = 0.0;
    for k in 0..b * d {
        let (m, lv) = (enc.mu[k].to_f64(), enc.logvar[k].to_f64());
        kl += 0.5 * (m * m + lv.exp() - 1.0 - lv);
    }
    kl /= b as f64;

    let dec = decoder_forward(p, &z, b);
    let vae_w = if objective == Objective::DragOnly { T::zero() } else { T::one() };
    let (recon, dlogits) = bce_from_logits(&dec.logits, &batch.images, vae_w);

    let bt = T::of(b as f64);
    let dn = dn_forward(p, &z, b);
    let (dn_loss, dy) = squared_error(&dn.y, &batch.labels);
    let parts = LossParts { recon, kl, dn: dn_loss };

    let mut dz = vec![T::zero(); b * d];
    if objective != Objective::DragOnly {
        let dzd = decoder_backward(p, &z, &dec, &dlogits, b, &mut g);
        dz.iter_mut().zip(&dzd).for_each(|(a, &v)| *a += v);
    }
    if objective != Objective::Vae {
        let mut gd = zero_grads(p);
        let dzn = dn_backward(p, &z, &dn, &dy, b, &mut gd);
        for k in DRAG_NET {
            g[k] = std::mem::take(&mut gd[k]);
        }
        if objective == Objective::Joint {
            dz.iter_mut().zip(&dzn).for_each(|(a, &v)| *a += v);
        }
    }
    if objective != Objective::DragOnly {
        let kw = T::of(kl_weight) / bt;
        let mut dmu = vec![T::zero(); b * d];
        let mut dlv = vec![T::zero(); b * d];
        for k in 0..b * d {
            dmu[k] = dz[k] + kw * enc.mu[k];
            dlv[k] = dz[k] * half * sigma[k] * batch.noise[k] + kw * half * (enc.logvar[k].exp() - T::one());
        }
        encoder_backward(p, &enc, &dmu, &dlv, b, &mut g);
    }
    debug_assert!(objective != Objective::Vae || g[DRAG_NET].iter().all(|t| t.iter().all(|v| v.is_zero())));
    debug_assert!(objective != Objective::DragOnly || g[ENCODER.start..DECODER.end].iter().all(|t| t.iter().all(|v| v.is_zero())));
    (parts, g)
}

/// Scalar objective matching [`loss_and_grads`], for finite-difference
/// checks.
#[cfg(test)]
pub fn objective_value<T: Scalar>(p: &NetworkParams<T>, batch: &Batch<T>, objective: Objective, kl_weight: f64) -> f64 {
    let (l, _) = loss_and_grads(p, batch, objective, kl_weight);
    match objective {
        Objective::Joint => l.recon + kl_weight * l.kl + l.dn,
        Objective::Vae => l.recon + kl_weight * l.kl,
        Objective::DragOnly => l.dn,
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_batch(size: usize, cfg: &super::super::NetConfig, seed: u64) -> Batch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..size * cfg.pixels()).map(|i| ((i * 7 + seed as usize) % 3 == 0) as u8 as f64).collect();
        let labels = (0..size).map(|_| StandardNormal.sample(&mut rng)).collect();
        let noise = (0..size * cfg.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Batch { size, images, labels, noise }
    }

    /// Central differences at step 1e-4 against the analytic gradient, in
    /// double precision.
    fn check(objective: Objective, groups: &[std::ops::Range<usize>], seed: u64) {
        let cfg = tiny();
        let mut p = NetworkParams::<f64>::init(cfg, seed).unwrap();
        // Non-zero biases so that every path is exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for t in &mut p.tensors {
            if t.shape.len() == 1 {
                for v in &mut t.data {
                    *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        let batch = random_batch(3, &cfg, seed);
        let kw = 0.7;
        let (_, g) = loss_and_grads(&p, &batch, objective, kw);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for group in groups {
            for k in group.clone() {
                for i in 0..p.tensors[k].data.len() {
                    let orig = p.tensors[k].data[i];
                    p.tensors[k].data[i] = orig + h;
                    let fp = objective_value(&p, &batch, objective, kw);
                    p.tensors[k].data[i] = orig - h;
                    let fm = objective_value(&p, &batch, objective, kw);
                    p.tensors[k].data[i] = orig;
                    let fd = (fp - fm) / (2.0 * h);
                    let an = g[k][i];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    worst = worst.max(rel);
                    assert!(rel < 1e-4, "{} [{i}]: fd {fd:e} vs analytic {an:e}", p.tensors[k].name);
                }
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        check(Objective::Joint, &[ENCODER, DECODER, DRAG_NET], 1);
    }

    #[test]
    fn vae_gradients_match_finite_differences() {
        check(Objective::Vae, &[ENCODER, DECODER], 2);
    }

    #[test]
    fn drag_only_gradients_match_finite_differences() {
        check(Objective::DragOnly, &[DRAG_NET], 3);
    }

    #[test]
    fn frozen_groups_get_zero_gradient() {
        let cfg = tiny();
        let p = NetworkParams::<f64>::init(cfg, 4).unwrap();
        let batch = random_batch(2, &cfg, 4);
        let (_, g) = loss_and_grads(&p, &batch, Objective::Vae, 1.0);
        assert!(g[DRAG_NET].iter().flatten().all(|&v| v == 0.0));
        let (_, g) = loss_and_grads(&p, &batch, Objective::DragOnly, 1.0);
        assert!(g[ENCODER.start..DECODER.end].iter().flatten().all(|&v| v == 0.0));
        assert!(g[DRAG_NET].iter().flatten().any(|&v| v != 0.0));
    }

    #[test]
    fn cached_drag_step_equals_full_drag_only_pass() {
        let cfg = tiny();
        let p = NetworkParams::<f64>::init(cfg, 5).unwrap();
        let batch = random_batch(3, &cfg, 5);
        let (l, g) = loss_and_grads(&p, &batch, Objective::DragOnly, 1.0);
        let e = encoder_forward(&p, &batch.images, 3);
        let (dn, gc) = drag_only_step(&p, &e.mu, &e.logvar, &batch.labels, &batch.noise);
        assert_eq!(dn.to_bits(), l.dn.to_bits());
        assert_eq!(g, gc);
    }

    #[test]
    fn reported_kl_matches_closed_form() {
        let cfg = tiny();
        let p = NetworkParams::<f64>::init(cfg, 9).unwrap();
        let batch = random_batch(2, &cfg, 9);
        let (l, _) = loss_and_grads(&p, &batch, Objective::Joint, 1.0);
        let e = encoder_forward(&p, &batch.images, 2);
        let mut kl = 0.0;
        for i in 0..2 {
            let r = i * cfg.latent_dim..(i + 1) * cfg.latent_dim;
            kl += super::super::kl_divergence(&super::super::EncoderOutput { mu: e.mu[r.clone()].to_vec(), logvar: e.logvar[r].to_vec() });
        }
        assert!((l.kl - kl / 2.0).abs() < 1e-14);
    }
}
