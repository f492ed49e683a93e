use ndarray::{Array1, Array2};

use super::dense::sigmoid;
use super::params::Parameters;
use super::{uniform_fan_in, RealMatrix};
use crate::error::{ensure_shape, Error, Result};
use crate::rng::Rng;

/// Standard LSTM cell. Each gate matrix acts on the concatenation
/// `[input, hidden]` and is shaped `(hidden, input + hidden)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub input_gate: RealMatrix,
    pub forget_gate: RealMatrix,
    pub output_gate: RealMatrix,
    pub candidate: RealMatrix,
    pub input_bias: Array1<f64>,
    pub forget_bias: Array1<f64>,
    pub output_bias: Array1<f64>,
    pub candidate_bias: Array1<f64>,
}

/// Intermediates of one [`LstmCell::step_taped`] call.
#[derive(Clone, Debug)]
pub struct LstmStepTape {
    concat: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    cell_prev: Vec<f64>,
    cell_tanh: Vec<f64>,
}

impl LstmCell {
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let fan_in = input + hidden;
        let mut gate = || uniform_fan_in(rng, hidden, fan_in, fan_in);
        let (input_gate, forget_gate, output_gate, candidate) = (gate(), gate(), gate(), gate());
        let mut bias = || uniform_fan_in(rng, 1, hidden, fan_in).into_shape_with_order(hidden).unwrap();
        let (input_bias, forget_bias, output_bias, candidate_bias) = (bias(), bias(), bias(), bias());
        LstmCell {
            input_gate,
            forget_gate,
            output_gate,
            candidate,
            input_bias,
            forget_bias,
            output_bias,
            candidate_bias,
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        let m = || Array2::zeros((hidden, input + hidden));
        let b = || Array1::zeros(hidden);
        LstmCell {
            input_gate: m(),
            forget_gate: m(),
            output_gate: m(),
            candidate: m(),
            input_bias: b(),
            forget_bias: b(),
            output_bias: b(),
            candidate_bias: b(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LstmCell::zeros(self.input_width(), self.hidden_width())
    }

    pub fn hidden_width(&self) -> usize {
        self.input_gate.nrows()
    }

    pub fn input_width(&self) -> usize {
        self.input_gate.ncols() - self.hidden_width()
    }

    fn check(&self, input: &[f64], hidden: &[f64], cell: &[f64]) -> Result<()> {
        let (n, h) = (self.input_width(), self.hidden_width());
        ensure_shape(input.len() == n && hidden.len() == h && cell.len() == h, || {
            format!(
                "lstm step expects input {n}, hidden/cell {h}; got {}/{}/{}",
                input.len(),
                hidden.len(),
                cell.len()
            )
        })
    }

    /// One recurrence step, returning `(hidden', cell')`.
    pub fn step(&self, input: &[f64], hidden: &[f64], cell: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (h, c, _) = self.step_taped(input, hidden, cell)?;
        Ok((h, c))
    }

    pub fn step_taped(
        &self,
        input: &[f64],
        hidden: &[f64],
        cell: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, LstmStepTape)> {
        self.check(input, hidden, cell)?;
        let width = self.hidden_width();
        let mut concat = Vec::with_capacity(input.len() + width);
        concat.extend_from_slice(input);
        concat.extend_from_slice(hidden);

        let gate = |w: &RealMatrix, b: &Array1<f64>, act: fn(f64) -> f64| -> Vec<f64> {
            w.outer_iter()
                .zip(b.iter())
                .map(|(row, bias)| act(dot(row.as_slice().unwrap(), &concat) + bias))
                .collect()
        };
        let i = gate(&self.input_gate, &self.input_bias, sigmoid);
        let f = gate(&self.forget_gate, &self.forget_bias, sigmoid);
        let o = gate(&self.output_gate, &self.output_bias, sigmoid);
        let g = gate(&self.candidate, &self.candidate_bias, f64::tanh);

        let mut cell_next = vec![0.0; width];
        let mut cell_tanh = vec![0.0; width];
        let mut hidden_next = vec![0.0; width];
        for k in 0..width {
            cell_next[k] = f[k] * cell[k] + i[k] * g[k];
            cell_tanh[k] = cell_next[k].tanh();
            hidden_next[k] = o[k] * cell_tanh[k];
        }
        let tape = LstmStepTape {
            concat,
            i,
            f,
            o,
            g,
            cell_prev: cell.to_vec(),
            cell_tanh,
        };
        Ok((hidden_next, cell_next, tape))
    }

    /// Backward through one step. Takes the gradients flowing into `hidden'`
    /// and `cell'`, accumulates parameter gradients, and returns the gradients
    /// for `(input, hidden, cell)`.
    pub fn backward_step(
        &self,
        tape: &LstmStepTape,
        grad_hidden: &[f64],
        grad_cell: &[f64],
        grads: &mut LstmCell,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let width = self.hidden_width();
        let n = self.input_width();
        if tape.concat.len() != n + width || tape.i.len() != width {
            return Err(Error::Consistency(format!(
                "lstm tape of width {} does not match cell {}x{}",
                tape.concat.len(),
                width,
                n + width
            )));
        }
        ensure_shape(grad_hidden.len() == width && grad_cell.len() == width, || {
            "lstm output gradient width".into()
        })?;
        ensure_shape(grads.input_gate.dim() == self.input_gate.dim(), || "lstm gradient buffer".into())?;

        let mut d_i = vec![0.0; width];
        let mut d_f = vec![0.0; width];
        let mut d_o = vec![0.0; width];
        let mut d_g = vec![0.0; width];
        let mut d_cell_prev = vec![0.0; width];
        for k in 0..width {
            let dc = grad_cell[k] + grad_hidden[k] * tape.o[k] * (1.0 - tape.cell_tanh[k] * tape.cell_tanh[k]);
            let d_o_out = grad_hidden[k] * tape.cell_tanh[k];
            d_o[k] = d_o_out * tape.o[k] * (1.0 - tape.o[k]);
            d_f[k] = dc * tape.cell_prev[k] * tape.f[k] * (1.0 - tape.f[k]);
            d_i[k] = dc * tape.g[k] * tape.i[k] * (1.0 - tape.i[k]);
            d_g[k] = dc * tape.i[k] * (1.0 - tape.g[k] * tape.g[k]);
            d_cell_prev[k] = dc * tape.f[k];
        }

        let mut d_concat = vec![0.0; n + width];
        let parts: [(&RealMatrix, &mut RealMatrix, &mut Array1<f64>, &[f64]); 4] = [
            (&self.input_gate, &mut grads.input_gate, &mut grads.input_bias, &d_i),
            (&self.forget_gate, &mut grads.forget_gate, &mut grads.forget_bias, &d_f),
            (&self.output_gate, &mut grads.output_gate, &mut grads.output_bias, &d_o),
            (&self.candidate, &mut grads.candidate, &mut grads.candidate_bias, &d_g),
        ];
        for (w, gw, gb, delta) in parts {
            let w = w.as_slice().unwrap();
            let gw = gw.as_slice_mut().unwrap();
            for (k, &d) in delta.iter().enumerate() {
                gb[k] += d;
                if d == 0.0 {
                    continue;
                }
                let row = k * (n + width);
                for j in 0..n + width {
                    gw[row + j] += d * tape.concat[j];
                    d_concat[j] += d * w[row + j];
                }
            }
        }
        let d_hidden_prev = d_concat.split_off(n);
        Ok((d_concat, d_hidden_prev, d_cell_prev))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Parameters for LstmCell {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let mats = [
            ("input_gate", &self.input_gate),
            ("forget_gate", &self.forget_gate),
            ("output_gate", &self.output_gate),
            ("candidate", &self.candidate),
        ];
        for (name, m) in mats {
            f(&format!("{prefix}{name}"), m.shape(), m.as_slice().unwrap());
        }
        let biases = [
            ("input_bias", &self.input_bias),
            ("forget_bias", &self.forget_bias),
            ("output_bias", &self.output_bias),
            ("candidate_bias", &self.candidate_bias),
        ];
        for (name, b) in biases {
            f(&format!("{prefix}{name}"), b.shape(), b.as_slice().unwrap());
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for m in [
            &mut self.input_gate,
            &mut self.forget_gate,
            &mut self.output_gate,
            &mut self.candidate,
        ] {
            f(m.as_slice_mut().unwrap());
        }
        for b in [
            &mut self.input_bias,
            &mut self.forget_bias,
            &mut self.output_bias,
            &mut self.candidate_bias,
        ] {
            f(b.as_slice_mut().unwrap());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::max_rel_error;
    use crate::nn::params::flatten;
    use crate::rng::seeded;

    #[test]
    fn zero_cell_stays_at_rest() {
        let cell = LstmCell::zeros(3, 4);
        let (h, c, tape) = cell.step_taped(&[0.0; 3], &[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!(h, vec![0.0; 4]);
        assert_eq!(c, vec![0.0; 4]);
        assert!(tape.i.iter().chain(&tape.f).chain(&tape.o).all(|&v| v == 0.5));
        assert!(tape.g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_preserves_cell() {
        let mut cell = LstmCell::zeros(2, 3);
        cell.forget_bias.fill(1e3);
        cell.input_bias.fill(-1e3);
        let prev = [0.3, -0.7, 0.1];
        let (_, c) = cell.step(&[0.5, -0.5], &[0.2, 0.2, 0.2], &prev).unwrap();
        for (a, b) in c.iter().zip(prev) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hidden_state_is_bounded() {
        let mut rng = seeded(5, 0);
        let cell = LstmCell::new(4, 6, &mut rng);
        let (h, _) = cell.step(&[3.0, -2.0, 0.5, 9.0], &[0.9; 6], &[4.0; 6]).unwrap();
        assert!(h.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn rejects_mismatched_widths() {
        let cell = LstmCell::zeros(2, 3);
        assert!(matches!(cell.step(&[0.0; 3], &[0.0; 3], &[0.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(cell.step(&[0.0; 2], &[0.0; 2], &[0.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn bptt_matches_finite_differences() {
        // 4 * 5 * (3 + 5) + 4 * 5 = 180 parameters, 4 steps
        let mut rng = seeded(21, 0);
        let cell = LstmCell::new(3, 5, &mut rng);
        let xs: Vec<Vec<f64>> = (0..4)
            .map(|t| (0..3).map(|j| ((t * 3 + j) as f64 * 0.61).sin()).collect())
            .collect();
        let loss = |c: &LstmCell| {
            let (mut h, mut s) = (vec![0.0; 5], vec![0.0; 5]);
            let mut total = 0.0;
            for x in &xs {
                let (hn, sn) = c.step(x, &h, &s).unwrap();
                total += hn.iter().enumerate().map(|(k, v)| (k as f64 + 1.0) * v).sum::<f64>();
                h = hn;
                s = sn;
            }
            total + s.iter().sum::<f64>()
        };
        let (mut h, mut s) = (vec![0.0; 5], vec![0.0; 5]);
        let mut tapes = Vec::new();
        for x in &xs {
            let (hn, sn, t) = cell.step_taped(x, &h, &s).unwrap();
            tapes.push(t);
            h = hn;
            s = sn;
        }
        let mut grads = cell.zeros_like();
        let per_step: Vec<f64> = (0..5).map(|k| k as f64 + 1.0).collect();
        let mut dh = per_step.clone();
        let mut dc = vec![1.0; 5];
        for tape in tapes.iter().rev() {
            let (_, dh_prev, dc_prev) = cell.backward_step(tape, &dh, &dc, &mut grads).unwrap();
            dh = dh_prev.iter().zip(&per_step).map(|(a, b)| a + b).collect();
            dc = dc_prev;
        }
        let err = max_rel_error(&cell, &flatten(&grads), 1e-5, loss);
        assert!(err < 1e-4, "max relative error {err}");
    }
}
