//! Frame encoder: a variational autoencoder whose latent is also trained to
//! predict the action linking two consecutive frames through an inverse model.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::nn::{Activation, Adam, AdamSettings, Checkpoint, Dense, Mlp, Parameters};
use crate::par::{self, Execution};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionLoss {
    /// Bernoulli cross-entropy, offset by the target's own entropy so that a
    /// perfect reconstruction scores exactly zero.
    CrossEntropy,
    SquaredError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeSettings {
    pub latent_width: usize,
    pub hidden_width: usize,
    pub kl_weight: f64,
    pub inverse_weight: f64,
    pub reconstruction: ReconstructionLoss,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for VaeSettings {
    fn default() -> Self {
        VaeSettings {
            latent_width: 64,
            hidden_width: 64,
            kl_weight: 1e-3,
            inverse_weight: 1.0,
            reconstruction: ReconstructionLoss::CrossEntropy,
            learning_rate: 1e-4,
            batch_size: 256,
            epochs: 30,
        }
    }
}

/// `(s, a, s')` with observations in `[0, 1]` and actions in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionTriple {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
}

impl TransitionTriple {
    pub fn new(s: Vec<f64>, a: Vec<f64>, s_next: Vec<f64>) -> Result<Self> {
        let obs_ok = |v: &[f64]| v.iter().all(|x| (0.0..=1.0).contains(x));
        if s.len() != s_next.len() {
            return Err(Error::Shape("triple observations differ in width".into()));
        }
        if !obs_ok(&s) || !obs_ok(&s_next) {
            return Err(Error::Input("observation outside [0, 1]".into()));
        }
        if !a.iter().all(|x| (-1.0..=1.0).contains(x)) {
            return Err(Error::Input("action outside [-1, 1]".into()));
        }
        Ok(TransitionTriple { s, a, s_next })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VaeLossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub inverse: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    pub encoder: Dense,
    pub mean_head: Dense,
    pub logvar_head: Dense,
    /// Emits logits; [`VaeModel::decode`] applies the sigmoid.
    pub decoder: Mlp,
    pub inverse: Dense,
    pub kl_weight: f64,
    pub inverse_weight: f64,
    pub reconstruction: ReconstructionLoss,
}

impl VaeModel {
    pub fn new(obs_width: usize, action_width: usize, settings: &VaeSettings, rng: &mut Rng) -> Self {
        let (h, l) = (settings.hidden_width, settings.latent_width);
        VaeModel {
            encoder: Dense::new(obs_width, h, Activation::Relu, rng),
            mean_head: Dense::new(h, l, Activation::Identity, rng),
            logvar_head: Dense::new(h, l, Activation::Identity, rng),
            decoder: Mlp::new(&[l, h, obs_width], Activation::Relu, Activation::Identity, rng),
            inverse: Dense::new(2 * l, action_width, Activation::Tanh, rng),
            kl_weight: settings.kl_weight,
            inverse_weight: settings.inverse_weight,
            reconstruction: settings.reconstruction,
        }
    }

    pub fn zeros_like(&self) -> Self {
        VaeModel {
            encoder: self.encoder.zeros_like(),
            mean_head: self.mean_head.zeros_like(),
            logvar_head: self.logvar_head.zeros_like(),
            decoder: self.decoder.zeros_like(),
            inverse: self.inverse.zeros_like(),
            ..*self
        }
    }

    pub fn obs_width(&self) -> usize {
        self.encoder.input_width()
    }

    pub fn latent_width(&self) -> usize {
        self.mean_head.output_width()
    }

    pub fn action_width(&self) -> usize {
        self.inverse.output_width()
    }

    /// Encodes one observation. With `noise` the latent is sampled by
    /// reparameterisation, otherwise `z` is the mean.
    pub fn encode(&self, s: &[f64], noise: Option<&mut Rng>) -> Result<Encoding> {
        let hidden = self.encoder.forward(s)?;
        let mean = self.mean_head.forward(&hidden)?;
        let sigma: Vec<f64> = self
            .logvar_head
            .forward(&hidden)?
            .into_iter()
            .map(|lv| (0.5 * lv).exp())
            .collect();
        let z = match noise {
            Some(rng) => mean
                .iter()
                .zip(&sigma)
                .map(|(m, sd)| {
                    let eta: f64 = StandardNormal.sample(rng);
                    m + sd * eta
                })
                .collect(),
            None => mean.clone(),
        };
        if !z.iter().chain(&sigma).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("encoder produced a non-finite latent".into()));
        }
        Ok(Encoding { mean, sigma, z })
    }

    /// Deterministic latent (the mean) of every row of `frames`.
    pub fn encode_mean_batch(&self, frames: ArrayView2<f64>) -> Result<Array2<f64>> {
        let hidden = self.encoder.forward_batch(frames)?;
        let mean = self.mean_head.forward_batch(hidden.view())?;
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("encoder produced a non-finite latent".into()));
        }
        Ok(mean)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .decoder
            .forward(z)?
            .into_iter()
            .map(|l| Activation::Sigmoid.apply(l))
            .collect())
    }

    pub fn inverse_predict(&self, z: &[f64], z_next: &[f64]) -> Result<Vec<f64>> {
        let w = self.latent_width();
        ensure_shape(z.len() == w && z_next.len() == w, || {
            format!("inverse model expects two latents of width {w}")
        })?;
        let joined: Vec<f64> = z.iter().chain(z_next).copied().collect();
        self.inverse.forward(&joined)
    }

    /// Loss of one triple with the reparameterisation noise given explicitly
    /// (`eta`, `eta_next`), which makes the loss a plain function of the weights.
    pub fn loss_with_noise(&self, triple: &TransitionTriple, eta: &[f64], eta_next: &[f64]) -> Result<VaeLossBreakdown> {
        let batch = Batch::from_triples(std::slice::from_ref(triple), self)?;
        let noise = (
            row(eta, self.latent_width())?,
            row(eta_next, self.latent_width())?,
        );
        let (loss, _) = self.batch_loss_and_grad(&batch, &noise, 1.0, false)?;
        Ok(loss)
    }

    /// Loss evaluated at the latent means (no sampling).
    pub fn loss(&self, triple: &TransitionTriple) -> Result<VaeLossBreakdown> {
        let zero = vec![0.0; self.latent_width()];
        self.loss_with_noise(triple, &zero, &zero)
    }

    /// Mean loss over `triples` and, when `want_grad`, its gradient. `scale`
    /// divides the summed loss; pass the full minibatch size when `triples` is
    /// one chunk of it.
    fn batch_loss_and_grad(
        &self,
        batch: &Batch,
        noise: &(Array2<f64>, Array2<f64>),
        scale: f64,
        want_grad: bool,
    ) -> Result<(VaeLossBreakdown, Option<VaeModel>)> {
        let (eta, eta_next) = noise;
        let enc = self.encode_taped(batch.s.view(), eta.view())?;
        let enc_next = self.encode_taped(batch.s_next.view(), eta_next.view())?;
        let dec_tape = self.decoder.forward_taped(enc.z.clone())?;
        let logits = dec_tape.output();
        let inv_in = concatenate(Axis(1), &[enc.z.view(), enc_next.z.view()]).unwrap();
        let a_hat = self.inverse.forward_batch(inv_in.view())?;

        let mut recon = 0.0;
        let mut d_logits = Array2::zeros(logits.raw_dim());
        for ((&l, &x), d) in logits.iter().zip(batch.s.iter()).zip(d_logits.iter_mut()) {
            let p = Activation::Sigmoid.apply(l);
            match self.reconstruction {
                ReconstructionLoss::CrossEntropy => {
                    recon += softplus(l) - x * l - bernoulli_entropy(x);
                    *d = p - x;
                }
                ReconstructionLoss::SquaredError => {
                    recon += 0.5 * (p - x) * (p - x);
                    *d = (p - x) * p * (1.0 - p);
                }
            }
        }
        let mut kl = 0.0;
        for (&m, &lv) in enc.mean.iter().zip(enc.logvar.iter()) {
            kl += 0.5 * (m * m + lv.exp() - lv - 1.0);
        }
        let diff = &a_hat - &batch.a;
        let inverse = 0.5 * diff.mapv(|d| d * d).sum();

        let loss = VaeLossBreakdown {
            reconstruction: recon / scale,
            kl: kl / scale,
            inverse: inverse / scale,
            total: (recon + self.kl_weight * kl + self.inverse_weight * inverse) / scale,
        };
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("vae loss is {}", loss.total)));
        }
        if !want_grad {
            return Ok((loss, None));
        }

        let mut grads = self.zeros_like();
        let d_a_hat = diff * (self.inverse_weight / scale);
        let d_inv_in = self
            .inverse
            .backward_batch(inv_in.view(), a_hat.view(), d_a_hat.view(), Some(&mut grads.inverse), true)?
            .unwrap();
        let w = self.latent_width();
        let mut d_z = self
            .decoder
            .backward(&dec_tape, d_logits / scale, Some(&mut grads.decoder), true)?
            .unwrap();
        d_z += &d_inv_in.slice(s![.., ..w]);
        let d_z_next = d_inv_in.slice(s![.., w..]).to_owned();

        let kl_scale = self.kl_weight / scale;
        let d_mean = &d_z + &(&enc.mean * kl_scale);
        let mut d_logvar = &d_z * &enc.eta * &enc.sigma * 0.5;
        d_logvar.zip_mut_with(&enc.logvar, |d, &lv| *d += kl_scale * 0.5 * (lv.exp() - 1.0));
        self.backward_encoder(&enc, d_mean, d_logvar, &mut grads)?;

        let d_logvar_next = &d_z_next * &enc_next.eta * &enc_next.sigma * 0.5;
        self.backward_encoder(&enc_next, d_z_next, d_logvar_next, &mut grads)?;
        Ok((loss, Some(grads)))
    }

    fn encode_taped(&self, x: ArrayView2<f64>, eta: ArrayView2<f64>) -> Result<EncoderTape> {
        let hidden = self.encoder.forward_batch(x)?;
        let mean = self.mean_head.forward_batch(hidden.view())?;
        let logvar = self.logvar_head.forward_batch(hidden.view())?;
        ensure_shape(eta.dim() == mean.dim(), || "latent noise shape".into())?;
        let sigma = logvar.mapv(|lv| (0.5 * lv).exp());
        let z = &mean + &(&sigma * &eta);
        Ok(EncoderTape {
            input: x.to_owned(),
            hidden,
            mean,
            logvar,
            sigma,
            eta: eta.to_owned(),
            z,
        })
    }

    fn backward_encoder(
        &self,
        tape: &EncoderTape,
        d_mean: Array2<f64>,
        d_logvar: Array2<f64>,
        grads: &mut VaeModel,
    ) -> Result<()> {
        let mut d_hidden = self
            .mean_head
            .backward_batch(tape.hidden.view(), tape.mean.view(), d_mean.view(), Some(&mut grads.mean_head), true)?
            .unwrap();
        d_hidden += &self
            .logvar_head
            .backward_batch(
                tape.hidden.view(),
                tape.logvar.view(),
                d_logvar.view(),
                Some(&mut grads.logvar_head),
                true,
            )?
            .unwrap();
        self.encoder.backward_batch(
            tape.input.view(),
            tape.hidden.view(),
            d_hidden.view(),
            Some(&mut grads.encoder),
            false,
        )?;
        Ok(())
    }

    /// Mean loss and gradient over a minibatch, computed in fixed-size chunks.
    pub fn minibatch_gradient(
        &self,
        triples: &[&TransitionTriple],
        rng: &mut Rng,
        exec: Execution,
    ) -> Result<(VaeLossBreakdown, VaeModel)> {
        if triples.is_empty() {
            return Err(Error::Precondition("empty minibatch".into()));
        }
        let w = self.latent_width();
        let n = triples.len();
        let eta = Array2::from_shape_simple_fn((n, w), || StandardNormal.sample(rng));
        let eta_next = Array2::from_shape_simple_fn((n, w), || StandardNormal.sample(rng));
        self.gradient_with_noise(triples, eta.view(), eta_next.view(), exec)
    }

    /// Mean loss and gradient with the reparameterisation noise given
    /// explicitly, one row per triple.
    pub fn gradient_with_noise(
        &self,
        triples: &[&TransitionTriple],
        eta: ArrayView2<f64>,
        eta_next: ArrayView2<f64>,
        exec: Execution,
    ) -> Result<(VaeLossBreakdown, VaeModel)> {
        let n = triples.len();
        if n == 0 {
            return Err(Error::Precondition("empty minibatch".into()));
        }
        let shape = (n, self.latent_width());
        ensure_shape(eta.dim() == shape && eta_next.dim() == shape, || "noise rows".into())?;
        let indices: Vec<usize> = (0..n).collect();
        let parts = par::map_chunks(exec, &indices, GRAD_CHUNK, |chunk| {
            let lo = chunk[0];
            let hi = lo + chunk.len();
            let owned: Vec<TransitionTriple> = triples[lo..hi].iter().map(|t| (*t).clone()).collect();
            let batch = Batch::from_triples(&owned, self)?;
            let noise = (eta.slice(s![lo..hi, ..]).to_owned(), eta_next.slice(s![lo..hi, ..]).to_owned());
            self.batch_loss_and_grad(&batch, &noise, n as f64, true)
        });
        let mut total = VaeLossBreakdown::default();
        let mut grads = self.zeros_like();
        for part in parts {
            let (loss, g) = part?;
            total.reconstruction += loss.reconstruction;
            total.kl += loss.kl;
            total.inverse += loss.inverse;
            total.total += loss.total;
            crate::nn::accumulate(&mut grads, &g.unwrap());
        }
        Ok((total, grads))
    }

    pub fn store(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.store_params(prefix, self);
    }

    pub fn load(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        ckpt.load_params(prefix, self)
    }
}

pub(crate) const GRAD_CHUNK: usize = 64;

struct EncoderTape {
    input: Array2<f64>,
    hidden: Array2<f64>,
    mean: Array2<f64>,
    logvar: Array2<f64>,
    sigma: Array2<f64>,
    eta: Array2<f64>,
    z: Array2<f64>,
}

struct Batch {
    s: Array2<f64>,
    a: Array2<f64>,
    s_next: Array2<f64>,
}

impl Batch {
    fn from_triples(triples: &[TransitionTriple], model: &VaeModel) -> Result<Self> {
        let (o, act) = (model.obs_width(), model.action_width());
        for t in triples {
            ensure_shape(t.s.len() == o && t.s_next.len() == o && t.a.len() == act, || {
                format!("triple widths {}/{}/{} vs model {o}/{act}", t.s.len(), t.a.len(), t.s_next.len())
            })?;
        }
        let n = triples.len();
        let gather = |f: &dyn Fn(&TransitionTriple) -> &Vec<f64>, w: usize| {
            Array2::from_shape_vec((n, w), triples.iter().flat_map(|t| f(t).iter().copied()).collect()).unwrap()
        };
        Ok(Batch {
            s: gather(&|t| &t.s, o),
            a: gather(&|t| &t.a, act),
            s_next: gather(&|t| &t.s_next, o),
        })
    }
}

fn row(v: &[f64], width: usize) -> Result<Array2<f64>> {
    ensure_shape(v.len() == width, || format!("noise width {} vs latent {width}", v.len()))?;
    Ok(Array2::from_shape_vec((1, width), v.to_vec()).unwrap())
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn bernoulli_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// KL divergence of `N(mean, sigma^2)` from the standard normal, summed over dims.
pub fn gaussian_kl(mean: &[f64], sigma: &[f64]) -> f64 {
    mean.iter()
        .zip(sigma)
        .map(|(m, s)| 0.5 * (m * m + s * s - (s * s).ln() - 1.0))
        .sum()
}

impl Parameters for VaeModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.encoder.visit(&format!("{prefix}encoder."), f);
        self.mean_head.visit(&format!("{prefix}mean."), f);
        self.logvar_head.visit(&format!("{prefix}logvar."), f);
        self.decoder.visit(&format!("{prefix}decoder."), f);
        self.inverse.visit(&format!("{prefix}inverse."), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.encoder.visit_mut(f);
        self.mean_head.visit_mut(f);
        self.logvar_head.visit_mut(f);
        self.decoder.visit_mut(f);
        self.inverse.visit_mut(f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: VaeLossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs already completed (non-zero when resuming).
    pub start_epoch: usize,
    pub execution: Execution,
}

/// Minibatch Adam over `data`. Shuffling and latent noise are derived from
/// `(seed, epoch)`, so stopping after any epoch and resuming from a
/// checkpoint continues identically.
pub fn train_vae(
    model: &mut VaeModel,
    adam: &mut Adam,
    data: &[TransitionTriple],
    opts: &TrainOptions,
) -> Result<Vec<LossRecord>> {
    if data.is_empty() {
        return Err(Error::Precondition("cannot train the VAE on an empty dataset".into()));
    }
    let batch = opts.batch_size.max(1);
    let steps_per_epoch = data.len().div_ceil(batch);
    let mut history = Vec::new();
    for epoch in opts.start_epoch..opts.start_epoch + opts.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::seeded(rng::derive(opts.seed, epoch as u64), rng::stream::SHUFFLE));
        let mut noise = rng::seeded(rng::derive(opts.seed, epoch as u64), rng::stream::LATENT_NOISE);
        for (k, idx) in order.chunks(batch).enumerate() {
            let step = epoch * steps_per_epoch + k;
            let refs: Vec<&TransitionTriple> = idx.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = model.minibatch_gradient(&refs, &mut noise, opts.execution).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("vae diverged at step {step}: {msg}")),
                other => other,
            })?;
            adam.update(model, &grads)?;
            history.push(LossRecord { step, loss });
        }
    }
    Ok(history)
}

pub fn new_optimizer(model: &VaeModel, settings: &VaeSettings) -> Result<Adam> {
    Adam::for_model(AdamSettings::with_lr(settings.learning_rate), model)
}

/// Writes `step,reconstruction,kl,inverse,total`.
pub fn write_loss_csv(path: &std::path::Path, history: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "reconstruction", "kl", "inverse", "total"])?;
    for r in history {
        w.write_record([
            r.step.to_string(),
            r.loss.reconstruction.to_string(),
            r.loss.kl.to_string(),
            r.loss.inverse.to_string(),
            r.loss.total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::max_rel_error;
    use crate::nn::{flatten, param_count};
    use crate::rng::seeded;

    fn small(recon: ReconstructionLoss) -> VaeModel {
        let settings = VaeSettings {
            latent_width: 4,
            hidden_width: 6,
            reconstruction: recon,
            kl_weight: 0.7,
            inverse_weight: 1.3,
            ..VaeSettings::default()
        };
        VaeModel::new(5, 2, &settings, &mut seeded(4, 0))
    }

    fn triples() -> Vec<TransitionTriple> {
        (0..3)
            .map(|i| {
                let s: Vec<f64> = (0..5).map(|j| ((i * 5 + j) as f64 * 0.31).sin() * 0.5 + 0.5).collect();
                let s2: Vec<f64> = (0..5).map(|j| ((i * 5 + j) as f64 * 0.47).cos() * 0.5 + 0.5).collect();
                let a = vec![0.3 - 0.2 * i as f64, -0.6 + 0.1 * i as f64];
                TransitionTriple::new(s, a, s2).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_logvar_head_gives_unit_sigma() {
        let mut m = small(ReconstructionLoss::CrossEntropy);
        m.logvar_head = m.logvar_head.zeros_like();
        let e = m.encode(&[0.2; 5], None).unwrap();
        assert!(e.sigma.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn deterministic_and_seeded_encoding() {
        let m = small(ReconstructionLoss::CrossEntropy);
        let s = [0.1, 0.9, 0.4, 0.5, 0.0];
        assert_eq!(m.encode(&s, None).unwrap(), m.encode(&s, None).unwrap());
        let a = m.encode(&s, Some(&mut seeded(7, 1))).unwrap();
        let b = m.encode(&s, Some(&mut seeded(7, 1))).unwrap();
        assert_eq!(a.z, b.z);
        assert_ne!(a.z, a.mean);
    }

    #[test]
    fn inverse_head_range() {
        let mut m = small(ReconstructionLoss::CrossEntropy);
        let zero = m.inverse_predict(&[5.0; 4], &[-3.0; 4]).unwrap();
        assert!(zero.iter().all(|v| v.abs() < 1.0));
        m.inverse = m.inverse.zeros_like();
        assert_eq!(m.inverse_predict(&[1.0; 4], &[2.0; 4]).unwrap(), vec![0.0, 0.0]);
        assert!(m.inverse_predict(&[1.0; 3], &[2.0; 4]).is_err());
    }

    #[test]
    fn kl_closed_form() {
        assert_eq!(gaussian_kl(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
        assert!((gaussian_kl(&[1.0], &[1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exact_action_gives_zero_inverse_loss() {
        let mut m = small(ReconstructionLoss::CrossEntropy);
        m.inverse = m.inverse.zeros_like();
        m.inverse.bias[0] = 0.5f64.atanh();
        m.inverse.bias[1] = (-0.25f64).atanh();
        let t = TransitionTriple::new(vec![0.5; 5], vec![0.5, -0.25], vec![0.5; 5]).unwrap();
        assert!(m.loss(&t).unwrap().inverse < 1e-30);
    }

    #[test]
    fn breakdown_total_is_weighted_sum() {
        let m = small(ReconstructionLoss::CrossEntropy);
        let l = m.loss(&triples()[0]).unwrap();
        assert!(l.reconstruction >= 0.0 && l.kl >= 0.0 && l.inverse >= 0.0);
        let expect = l.reconstruction + 0.7 * l.kl + 1.3 * l.inverse;
        assert!((l.total - expect).abs() < 1e-12);
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        for recon in [ReconstructionLoss::CrossEntropy, ReconstructionLoss::SquaredError] {
            let m = small(recon);
            assert!(param_count(&m) < 1000);
            let data = triples();
            let refs: Vec<&TransitionTriple> = data.iter().collect();
            let mut rng = seeded(3, 3);
            let (_, grads) = m.minibatch_gradient(&refs, &mut rng, Execution::Sequential).unwrap();
            // replay the exact noise draws for the finite-difference loss
            let mut rng = seeded(3, 3);
            let n = data.len();
            let eta = Array2::<f64>::from_shape_simple_fn((n, 4), || StandardNormal.sample(&mut rng));
            let eta2 = Array2::<f64>::from_shape_simple_fn((n, 4), || StandardNormal.sample(&mut rng));
            let loss = |p: &VaeModel| {
                (0..n)
                    .map(|i| {
                        p.loss_with_noise(&data[i], eta.row(i).as_slice().unwrap(), eta2.row(i).as_slice().unwrap())
                            .unwrap()
                            .total
                    })
                    .sum::<f64>()
                    / n as f64
            };
            let err = max_rel_error(&m, &flatten(&grads), 1e-5, loss);
            assert!(err < 1e-4, "{recon:?}: max relative error {err}");
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut m = small(ReconstructionLoss::CrossEntropy);
        let mut adam = new_optimizer(&m, &VaeSettings::default()).unwrap();
        let opts = TrainOptions {
            epochs: 1,
            batch_size: 4,
            seed: 0,
            start_epoch: 0,
            execution: Execution::Sequential,
        };
        assert!(matches!(train_vae(&mut m, &mut adam, &[], &opts), Err(Error::Precondition(_))));
    }

    #[test]
    fn triple_validation() {
        assert!(TransitionTriple::new(vec![1.2], vec![0.0], vec![0.5]).is_err());
        assert!(TransitionTriple::new(vec![0.2], vec![1.5], vec![0.5]).is_err());
        assert!(TransitionTriple::new(vec![0.2], vec![0.0], vec![0.5, 0.1]).is_err());
    }
}
