//! LSTM autoencoder over sequences of frame latents.
//!
//! The encoder's final hidden state is the behavior latent of a whole
//! sequence. The decoder starts from that state and reconstructs the sequence
//! back to front.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::nn::{accumulate, Activation, Adam, AdamSettings, Checkpoint, Dense, LstmCell, LstmStepTape, Parameters};
use crate::par::{self, Execution};
use crate::rng::{self, Rng};

pub const MAX_SEQUENCE_LEN: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LaeSettings {
    pub hidden_width: usize,
    pub teacher_forcing: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for LaeSettings {
    fn default() -> Self {
        LaeSettings {
            hidden_width: 32,
            teacher_forcing: false,
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 200,
        }
    }
}

/// Latent frames zero-padded to [`MAX_SEQUENCE_LEN`] rows. Rows at and beyond
/// `valid_len` are masked and always zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    frames: Array2<f64>,
    valid_len: usize,
}

impl LatentSequence {
    pub fn new(frames: ArrayView2<f64>) -> Result<Self> {
        let len = frames.nrows();
        if len == 0 || len > MAX_SEQUENCE_LEN {
            return Err(Error::Precondition(format!(
                "sequence length {len} outside [1, {MAX_SEQUENCE_LEN}]"
            )));
        }
        let mut padded = Array2::zeros((MAX_SEQUENCE_LEN, frames.ncols()));
        padded.slice_mut(ndarray::s![..len, ..]).assign(&frames);
        Ok(LatentSequence {
            frames: padded,
            valid_len: len,
        })
    }

    /// Accepts an already padded block; every masked row must be zero.
    pub fn from_padded(frames: Array2<f64>, valid_len: usize) -> Result<Self> {
        if frames.nrows() != MAX_SEQUENCE_LEN {
            return Err(Error::Shape(format!("padded sequence must have {MAX_SEQUENCE_LEN} rows")));
        }
        if valid_len == 0 || valid_len > MAX_SEQUENCE_LEN {
            return Err(Error::Precondition(format!("valid length {valid_len} outside [1, {MAX_SEQUENCE_LEN}]")));
        }
        if frames.slice(ndarray::s![valid_len.., ..]).iter().any(|&v| v != 0.0) {
            return Err(Error::Input("masked positions must be all-zero".into()));
        }
        Ok(LatentSequence { frames, valid_len })
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn width(&self) -> usize {
        self.frames.ncols()
    }

    pub fn padded(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn valid(&self) -> ArrayView2<'_, f64> {
        self.frames.slice(ndarray::s![..self.valid_len, ..])
    }

    /// Mask over all padded positions: `true` where the frame is real.
    pub fn mask(&self) -> Vec<bool> {
        (0..MAX_SEQUENCE_LEN).map(|t| t < self.valid_len).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaeModel {
    pub encoder: LstmCell,
    pub decoder: LstmCell,
    pub projection: Dense,
    pub teacher_forcing: bool,
}

struct EncoderTrace {
    steps: Vec<LstmStepTape>,
    hidden: Vec<f64>,
}

struct DecoderTrace {
    steps: Vec<LstmStepTape>,
    /// Input fed to the projection at each step (`h_t`), preceded by `phi`.
    proj_inputs: Vec<Vec<f64>>,
    /// `outputs[0]` is the projection of `phi` (first decoder input); the
    /// reconstruction for step `t` is `outputs[t + 1]`.
    outputs: Vec<Vec<f64>>,
}

impl LaeModel {
    pub fn new(latent_width: usize, settings: &LaeSettings, rng: &mut Rng) -> Self {
        let h = settings.hidden_width;
        LaeModel {
            encoder: LstmCell::new(latent_width, h, rng),
            decoder: LstmCell::new(latent_width, h, rng),
            projection: Dense::new(h, latent_width, Activation::Identity, rng),
            teacher_forcing: settings.teacher_forcing,
        }
    }

    pub fn zeros_like(&self) -> Self {
        LaeModel {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            projection: self.projection.zeros_like(),
            teacher_forcing: self.teacher_forcing,
        }
    }

    pub fn latent_width(&self) -> usize {
        self.encoder.input_width()
    }

    pub fn behavior_width(&self) -> usize {
        self.encoder.hidden_width()
    }

    /// Behavior latent of a padded sequence; masked frames are never fed.
    pub fn encode_sequence(&self, seq: &LatentSequence) -> Result<Vec<f64>> {
        self.encode_frames(seq.valid())
    }

    /// Behavior latent of an unpadded run of frames (any length ≥ 1).
    pub fn encode_frames(&self, frames: ArrayView2<f64>) -> Result<Vec<f64>> {
        if frames.nrows() == 0 {
            return Err(Error::Precondition("cannot encode an empty sequence".into()));
        }
        ensure_shape(frames.ncols() == self.latent_width(), || {
            format!("frames of width {} for encoder of width {}", frames.ncols(), self.latent_width())
        })?;
        let h = self.behavior_width();
        let (mut hidden, mut cell) = (vec![0.0; h], vec![0.0; h]);
        for row in frames.outer_iter() {
            let (hn, cn) = self.encoder.step(row.as_slice().unwrap(), &hidden, &cell)?;
            hidden = hn;
            cell = cn;
        }
        Ok(hidden)
    }

    fn encode_traced(&self, frames: ArrayView2<f64>) -> Result<EncoderTrace> {
        let h = self.behavior_width();
        let (mut hidden, mut cell) = (vec![0.0; h], vec![0.0; h]);
        let mut steps = Vec::with_capacity(frames.nrows());
        for row in frames.outer_iter() {
            let (hn, cn, tape) = self.encoder.step_taped(row.as_slice().unwrap(), &hidden, &cell)?;
            steps.push(tape);
            hidden = hn;
            cell = cn;
        }
        Ok(EncoderTrace { steps, hidden })
    }

    /// Closed-loop reconstruction of `length` frames, in reverse order.
    pub fn decode_sequence(&self, phi: &[f64], length: usize) -> Result<Vec<Vec<f64>>> {
        if length == 0 || length > MAX_SEQUENCE_LEN {
            return Err(Error::Precondition(format!("decode length {length} outside [1, {MAX_SEQUENCE_LEN}]")));
        }
        let trace = self.decode_traced(phi, length, None)?;
        Ok(trace.outputs[1..].to_vec())
    }

    fn decode_traced(&self, phi: &[f64], length: usize, teacher: Option<ArrayView2<f64>>) -> Result<DecoderTrace> {
        ensure_shape(phi.len() == self.behavior_width(), || {
            format!("behavior latent of width {} for decoder of width {}", phi.len(), self.behavior_width())
        })?;
        let mut hidden = phi.to_vec();
        let mut cell = vec![0.0; phi.len()];
        let mut outputs = vec![self.projection.forward(phi)?];
        let mut proj_inputs = vec![phi.to_vec()];
        let mut steps = Vec::with_capacity(length);
        for t in 0..length {
            let input = match (t, teacher) {
                (0, _) | (_, None) => outputs[t].clone(),
                (_, Some(target)) => target.row(t - 1).to_vec(),
            };
            let (hn, cn, tape) = self.decoder.step_taped(&input, &hidden, &cell)?;
            steps.push(tape);
            outputs.push(self.projection.forward(&hn)?);
            proj_inputs.push(hn.clone());
            hidden = hn;
            cell = cn;
        }
        Ok(DecoderTrace {
            steps,
            proj_inputs,
            outputs,
        })
    }

    /// Mean squared reconstruction error of the reversed sequence over the
    /// unmasked positions only.
    pub fn sequence_loss(&self, seq: &LatentSequence) -> Result<f64> {
        Ok(self.loss_and_grad(seq, 1.0, false)?.0)
    }

    /// Loss of one sequence (divided by `scale`) and optionally its gradient.
    fn loss_and_grad(&self, seq: &LatentSequence, scale: f64, want_grad: bool) -> Result<(f64, Option<LaeModel>)> {
        ensure_shape(seq.width() == self.latent_width(), || "sequence width".into())?;
        let len = seq.valid_len();
        let w = self.latent_width();
        let target = reversed(seq.valid());
        let enc = self.encode_traced(seq.valid())?;
        let teacher = self.teacher_forcing.then(|| target.view());
        let dec = self.decode_traced(&enc.hidden, len, teacher)?;

        let norm = (len * w) as f64 * scale;
        let mut loss = 0.0;
        let mut d_out: Vec<Vec<f64>> = Vec::with_capacity(len);
        for t in 0..len {
            let out = &dec.outputs[t + 1];
            let row: Vec<f64> = out
                .iter()
                .zip(target.row(t))
                .map(|(o, y)| {
                    loss += (o - y) * (o - y);
                    2.0 * (o - y) / norm
                })
                .collect();
            d_out.push(row);
        }
        let loss = loss / norm;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("lae loss is {loss}")));
        }
        if !want_grad {
            return Ok((loss, None));
        }

        let mut grads = self.zeros_like();
        let hw = self.behavior_width();
        let mut d_hidden = vec![0.0; hw];
        let mut d_cell = vec![0.0; hw];
        // gradient arriving at the input of decoder step t + 1
        let mut d_next_input = vec![0.0; w];
        for t in (0..len).rev() {
            let mut d_o = d_out[t].clone();
            if !self.teacher_forcing {
                for (a, b) in d_o.iter_mut().zip(&d_next_input) {
                    *a += b;
                }
            }
            let d_h_proj = self.project_backward(&dec.proj_inputs[t + 1], &dec.outputs[t + 1], &d_o, &mut grads)?;
            for (a, b) in d_hidden.iter_mut().zip(&d_h_proj) {
                *a += b;
            }
            let (d_in, d_h_prev, d_c_prev) =
                self.decoder
                    .backward_step(&dec.steps[t], &d_hidden, &d_cell, &mut grads.decoder)?;
            d_next_input = d_in;
            d_hidden = d_h_prev;
            d_cell = d_c_prev;
        }
        // step 0 was fed proj(phi); the initial decoder hidden state was phi
        let d_phi_proj = self.project_backward(&dec.proj_inputs[0], &dec.outputs[0], &d_next_input, &mut grads)?;
        let mut d_h: Vec<f64> = d_hidden.iter().zip(&d_phi_proj).map(|(a, b)| a + b).collect();
        let mut d_c = vec![0.0; hw];
        for tape in enc.steps.iter().rev() {
            let (_, dh, dc) = self.encoder.backward_step(tape, &d_h, &d_c, &mut grads.encoder)?;
            d_h = dh;
            d_c = dc;
        }
        Ok((loss, Some(grads)))
    }

    fn project_backward(&self, input: &[f64], output: &[f64], d_out: &[f64], grads: &mut LaeModel) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).unwrap();
        let y = Array2::from_shape_vec((1, output.len()), output.to_vec()).unwrap();
        let d = Array2::from_shape_vec((1, d_out.len()), d_out.to_vec()).unwrap();
        let dx = self
            .projection
            .backward_batch(x.view(), y.view(), d.view(), Some(&mut grads.projection), true)?
            .unwrap();
        Ok(dx.into_raw_vec_and_offset().0)
    }

    /// Mean per-sequence loss and gradient over a minibatch.
    pub fn minibatch_gradient(&self, seqs: &[&LatentSequence], exec: Execution) -> Result<(f64, LaeModel)> {
        if seqs.is_empty() {
            return Err(Error::Precondition("empty minibatch".into()));
        }
        let n = seqs.len() as f64;
        let parts = par::map_chunks(exec, seqs, SEQ_CHUNK, |chunk| {
            let mut g = self.zeros_like();
            let mut loss = 0.0;
            for seq in chunk {
                let (l, gs) = self.loss_and_grad(seq, n, true)?;
                loss += l;
                accumulate(&mut g, &gs.unwrap());
            }
            Ok::<_, Error>((loss, g))
        });
        let mut grads = self.zeros_like();
        let mut loss = 0.0;
        for part in parts {
            let (l, g) = part?;
            loss += l;
            accumulate(&mut grads, &g);
        }
        Ok((loss, grads))
    }
}

const SEQ_CHUNK: usize = 16;

fn reversed(frames: ArrayView2<f64>) -> Array2<f64> {
    let mut out = frames.to_owned();
    out.invert_axis(ndarray::Axis(0));
    out.as_standard_layout().to_owned()
}

/// Training target for a sequence: its valid frames in reverse order.
pub fn reversed_target(seq: &LatentSequence) -> Array2<f64> {
    reversed(seq.valid())
}

impl Parameters for LaeModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.encoder.visit(&format!("{prefix}encoder."), f);
        self.decoder.visit(&format!("{prefix}decoder."), f);
        self.projection.visit(&format!("{prefix}projection."), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
        self.projection.visit_mut(f);
    }
}

impl LaeModel {
    pub fn store(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.store_params(prefix, self);
    }

    pub fn load(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        ckpt.load_params(prefix, self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaeLossRecord {
    pub step: usize,
    pub loss: f64,
}

pub use crate::vae::TrainOptions;

pub fn new_optimizer(model: &LaeModel, settings: &LaeSettings) -> Result<Adam> {
    Adam::for_model(AdamSettings::with_lr(settings.learning_rate), model)
}

/// Minibatch Adam; same resume semantics as the VAE trainer.
pub fn train_lae(
    model: &mut LaeModel,
    adam: &mut Adam,
    data: &[LatentSequence],
    opts: &TrainOptions,
) -> Result<Vec<LaeLossRecord>> {
    if data.is_empty() {
        return Err(Error::Precondition("cannot train the LAE on an empty dataset".into()));
    }
    let batch = opts.batch_size.max(1);
    let steps_per_epoch = data.len().div_ceil(batch);
    let mut history = Vec::new();
    for epoch in opts.start_epoch..opts.start_epoch + opts.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::seeded(rng::derive(opts.seed, epoch as u64), rng::stream::SHUFFLE));
        for (k, idx) in order.chunks(batch).enumerate() {
            let step = epoch * steps_per_epoch + k;
            let refs: Vec<&LatentSequence> = idx.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = model.minibatch_gradient(&refs, opts.execution).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("lae diverged at step {step}: {msg}")),
                other => other,
            })?;
            adam.update(model, &grads)?;
            history.push(LaeLossRecord { step, loss });
        }
    }
    Ok(history)
}

/// Writes `step,loss`.
pub fn write_loss_csv(path: &std::path::Path, history: &[LaeLossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for r in history {
        w.write_record([r.step.to_string(), r.loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Euclidean distance helper shared by downstream modules.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::max_rel_error;
    use crate::nn::{flatten, param_count};
    use crate::rng::seeded;
    use ndarray::array;

    fn small(teacher_forcing: bool) -> LaeModel {
        let settings = LaeSettings {
            hidden_width: 5,
            teacher_forcing,
            ..LaeSettings::default()
        };
        LaeModel::new(4, &settings, &mut seeded(8, 0))
    }

    fn seq(len: usize, offset: f64) -> LatentSequence {
        let frames = Array2::from_shape_fn((len, 4), |(t, j)| ((t * 4 + j) as f64 * 0.7 + offset).sin());
        LatentSequence::new(frames.view()).unwrap()
    }

    #[test]
    fn zero_encoder_gives_zero_latent() {
        let mut m = small(false);
        m.encoder = m.encoder.zeros_like();
        assert_eq!(m.encode_sequence(&seq(7, 0.0)).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn padding_does_not_change_latent() {
        let m = small(false);
        let s = seq(6, 0.3);
        let longer = LatentSequence::from_padded(s.padded().clone(), 6).unwrap();
        assert_eq!(m.encode_sequence(&s).unwrap(), m.encode_sequence(&longer).unwrap());
        assert_eq!(m.encode_sequence(&s).unwrap(), m.encode_frames(s.valid()).unwrap());
        let phi = m.encode_sequence(&s).unwrap();
        assert!(phi.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn masked_rows_must_be_zero() {
        let mut padded = Array2::zeros((MAX_SEQUENCE_LEN, 4));
        padded[[10, 0]] = 1.0;
        assert!(LatentSequence::from_padded(padded, 3).is_err());
        assert!(LatentSequence::new(Array2::<f64>::zeros((0, 4)).view()).is_err());
        assert!(LatentSequence::new(Array2::<f64>::zeros((51, 4)).view()).is_err());
    }

    #[test]
    fn reverse_target_order() {
        let frames = array![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
        let s = LatentSequence::new(frames.view()).unwrap();
        assert_eq!(reversed_target(&s), array![[2.0, 2.0], [1.0, 1.0], [0.0, 0.0]]);
    }

    #[test]
    fn decode_lengths_and_zero_decoder() {
        let mut m = small(false);
        assert_eq!(m.decode_sequence(&[0.1; 5], 1).unwrap().len(), 1);
        assert!(m.decode_sequence(&[0.1; 5], 0).is_err());
        assert!(m.decode_sequence(&[0.1; 5], 51).is_err());
        m.decoder = m.decoder.zeros_like();
        m.projection.weights.fill(0.3);
        let out = m.decode_sequence(&[0.2; 5], 4).unwrap();
        for o in out {
            assert_eq!(o, m.projection.bias.to_vec());
        }
    }

    #[test]
    fn single_position_loss_counts_one_frame() {
        let m = small(false);
        let s = seq(1, 0.0);
        let phi = m.encode_sequence(&s).unwrap();
        let out = &m.decode_sequence(&phi, 1).unwrap()[0];
        let expect: f64 = out.iter().zip(s.valid().row(0)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 4.0;
        assert!((m.sequence_loss(&s).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn bptt_gradient_matches_finite_differences() {
        for tf in [false, true] {
            let m = small(tf);
            assert!(param_count(&m) < 1000, "{}", param_count(&m));
            let data = [seq(5, 0.0), seq(3, 1.0), seq(6, 2.0)];
            let refs: Vec<&LatentSequence> = data.iter().collect();
            let (_, g) = m.minibatch_gradient(&refs, Execution::Sequential).unwrap();
            let loss = |p: &LaeModel| data.iter().map(|s| p.sequence_loss(s).unwrap()).sum::<f64>() / 3.0;
            let err = max_rel_error(&m, &flatten(&g), 1e-5, loss);
            assert!(err < 1e-4, "teacher forcing {tf}: max relative error {err}");
        }
    }

    #[test]
    fn parallel_and_sequential_gradients_are_identical() {
        let m = small(false);
        let data: Vec<LatentSequence> = (0..40).map(|i| seq(1 + i % 9, i as f64)).collect();
        let refs: Vec<&LatentSequence> = data.iter().collect();
        let (la, ga) = m.minibatch_gradient(&refs, Execution::Parallel).unwrap();
        let (lb, gb) = m.minibatch_gradient(&refs, Execution::Sequential).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(flatten(&ga), flatten(&gb));
    }
}
