use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::params::Parameters;
use super::{uniform_fan_in, RealMatrix};
use crate::error::{ensure_shape, Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fully connected layer `y = act(W x + b)` with `W` shaped `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: RealMatrix,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn new(input: usize, output: usize, activation: Activation, rng: &mut Rng) -> Self {
        let weights = uniform_fan_in(rng, output, input, input);
        let bias = uniform_fan_in(rng, 1, output, input).into_shape_with_order(output).unwrap();
        Dense {
            weights,
            bias,
            activation,
        }
    }

    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Dense {
            weights: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
            activation,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Dense::zeros(self.input_width(), self.output_width(), self.activation)
    }

    pub fn input_width(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.weights.nrows()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        ensure_shape(input.len() == self.input_width(), || {
            format!("dense layer expects {} inputs, got {}", self.input_width(), input.len())
        })?;
        let out = self
            .weights
            .outer_iter()
            .zip(self.bias.iter())
            .map(|(row, b)| {
                let pre = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b;
                self.activation.apply(pre)
            })
            .collect();
        Ok(out)
    }

    /// Batched forward: one sample per row of `input`.
    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        ensure_shape(input.ncols() == self.input_width(), || {
            format!("dense layer expects {} inputs, got {}", self.input_width(), input.ncols())
        })?;
        let mut out = input.dot(&self.weights.t());
        out += &self.bias;
        let act = self.activation;
        if act != Activation::Identity {
            out.mapv_inplace(|x| act.apply(x));
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the layer input. `output` must be this layer's forward
    /// result for `input`.
    pub fn backward_batch(
        &self,
        input: ArrayView2<f64>,
        output: ArrayView2<f64>,
        grad_output: ArrayView2<f64>,
        grads: Option<&mut Dense>,
        want_input_grad: bool,
    ) -> Result<Option<Array2<f64>>> {
        if output.dim() != grad_output.dim()
            || output.nrows() != input.nrows()
            || output.ncols() != self.output_width()
            || input.ncols() != self.input_width()
        {
            return Err(Error::Consistency(format!(
                "dense tape {:?}/{:?} vs layer {}x{}",
                input.dim(),
                output.dim(),
                self.output_width(),
                self.input_width()
            )));
        }
        let act = self.activation;
        let delta = if act == Activation::Identity {
            grad_output.to_owned()
        } else {
            let mut d = grad_output.to_owned();
            d.zip_mut_with(&output, |g, &y| *g *= act.derivative_from_output(y));
            d
        };
        if let Some(g) = grads {
            ensure_shape(g.weights.dim() == self.weights.dim(), || "gradient buffer shape".into())?;
            ndarray::linalg::general_mat_mul(1.0, &delta.t(), &input, 1.0, &mut g.weights);
            g.bias += &delta.sum_axis(Axis(0));
        }
        Ok(want_input_grad.then(|| delta.dot(&self.weights)))
    }
}

impl Parameters for Dense {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&format!("{prefix}weights"), self.weights.shape(), self.weights.as_slice().unwrap());
        f(&format!("{prefix}bias"), self.bias.shape(), self.bias.as_slice().unwrap());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.weights.as_slice_mut().unwrap());
        f(self.bias.as_slice_mut().unwrap());
    }
}

/// Stack of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer activations recorded by [`Mlp::forward_taped`]; entry 0 is the
/// input, entry `k + 1` the output of layer `k`.
#[derive(Clone, Debug)]
pub struct MlpTape {
    pub activations: Vec<Array2<f64>>,
}

impl MlpTape {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("tape always holds the input")
    }
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`, hidden layers use `hidden`, the last one `output`.
    pub fn new(widths: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least an input and an output width");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let act = if k + 1 == n { output } else { hidden };
                Dense::new(widths[k], widths[k + 1], act, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().output_width()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut x = input.to_vec();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut x = self.layers[0].forward_batch(input)?;
        for layer in &self.layers[1..] {
            x = layer.forward_batch(x.view())?;
        }
        Ok(x)
    }

    pub fn forward_taped(&self, input: Array2<f64>) -> Result<MlpTape> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input);
        for layer in &self.layers {
            let next = layer.forward_batch(activations.last().unwrap().view())?;
            activations.push(next);
        }
        Ok(MlpTape { activations })
    }

    /// Backpropagates `grad_output` through the taped pass. Parameter
    /// gradients are accumulated into `grads` when given; the input gradient is
    /// returned when `want_input_grad` is set.
    pub fn backward(
        &self,
        tape: &MlpTape,
        grad_output: Array2<f64>,
        mut grads: Option<&mut Mlp>,
        want_input_grad: bool,
    ) -> Result<Option<Array2<f64>>> {
        if tape.activations.len() != self.layers.len() + 1 {
            return Err(Error::Consistency(format!(
                "tape has {} activations for {} layers",
                tape.activations.len(),
                self.layers.len()
            )));
        }
        if let Some(g) = grads.as_deref() {
            if g.layers.len() != self.layers.len() {
                return Err(Error::Consistency("gradient buffer layer count".into()));
            }
        }
        let mut grad = grad_output;
        for k in (0..self.layers.len()).rev() {
            let need_input = k > 0 || want_input_grad;
            let g = grads.as_deref_mut().map(|g| &mut g.layers[k]);
            let next = self.layers[k].backward_batch(
                tape.activations[k].view(),
                tape.activations[k + 1].view(),
                grad.view(),
                g,
                need_input,
            )?;
            match next {
                Some(n) => grad = n,
                None => return Ok(None),
            }
        }
        Ok(Some(grad))
    }
}

impl Parameters for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (k, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}{k}."), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for layer in &mut self.layers {
            layer.visit_mut(f);
        }
    }
}
