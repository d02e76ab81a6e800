use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::matrix::{axpy, dot};
use crate::error::{ClueError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

impl OutputActivation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            OutputActivation::Identity => x,
            OutputActivation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            OutputActivation::Identity => 1.0,
            OutputActivation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Fully connected feed-forward network.
///
/// Parameters live in a single buffer. Layer `l` with shape `(in, out)` owns
/// an `out × in` row-major weight block followed by `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    params: Vec<f64>,
    hidden: Activation,
    output: OutputActivation,
}

/// Per-hidden-layer inverted-dropout multipliers (0 or `1/(1-p)`).
pub type DropoutMasks = Vec<Vec<f64>>;

/// Intermediate values of one forward pass, consumed by [`Mlp::backward_trace`].
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    masks: Option<DropoutMasks>,
    pub output: Vec<f64>,
}

impl Mlp {
    /// Zero-initialized network.
    pub fn zeros(sizes: &[usize], hidden: Activation, output: OutputActivation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(ClueError::InvalidArgument(format!(
                "network needs at least two non-zero layer sizes, got {sizes:?}"
            )));
        }
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut total = 0;
        for w in sizes.windows(2) {
            offsets.push(total);
            total += w[0] * w[1] + w[1];
        }
        offsets.push(total);
        Ok(Self {
            sizes: sizes.to_vec(),
            offsets,
            params: vec![0.0; total],
            hidden,
            output,
        })
    }

    /// Uniform fan-in initialization, `U(-1/√in, 1/√in)` for weights and biases.
    pub fn new(
        sizes: &[usize],
        hidden: Activation,
        output: OutputActivation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, hidden, output)?;
        for l in 0..net.num_layers() {
            let bound = 1.0 / (net.sizes[l] as f64).sqrt();
            let range = net.layer_range(l);
            for p in &mut net.params[range] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn from_params(
        sizes: &[usize],
        hidden: Activation,
        output: OutputActivation,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, hidden, output)?;
        if params.len() != net.params.len() {
            return Err(ClueError::dims(
                "mlp parameters",
                net.params.len(),
                params.len(),
            ));
        }
        net.params = params;
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Index range of layer `l`'s weights and biases inside the flat buffer.
    pub fn layer_range(&self, l: usize) -> Range<usize> {
        self.offsets[l]..self.offsets[l + 1]
    }

    pub fn weights(&self, l: usize) -> &[f64] {
        let start = self.offsets[l];
        &self.params[start..start + self.sizes[l] * self.sizes[l + 1]]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let end = self.offsets[l + 1];
        &self.params[end - self.sizes[l + 1]..end]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let end = self.offsets[l + 1];
        let out = self.sizes[l + 1];
        &mut self.params[end - out..end]
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        let last = self.num_layers() - 1;
        for l in 0..=last {
            let mut z = self.affine(l, &x);
            if l == last {
                z.iter_mut().for_each(|v| *v = self.output.apply(*v));
            } else {
                z.iter_mut().for_each(|v| *v = self.hidden.apply(*v));
            }
            x = z;
        }
        Ok(x)
    }

    /// Forward pass keeping everything `backward_trace` needs.
    pub fn forward_trace(&self, input: &[f64], masks: Option<DropoutMasks>) -> Result<Trace> {
        self.check_input(input)?;
        if let Some(m) = &masks {
            if m.len() != self.num_layers() - 1 {
                return Err(ClueError::dims(
                    "dropout masks",
                    self.num_layers() - 1,
                    m.len(),
                ));
            }
        }
        let last = self.num_layers() - 1;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut x = input.to_vec();
        for l in 0..=last {
            let z = self.affine(l, &x);
            let mut h: Vec<f64> = if l == last {
                z.iter().map(|&v| self.output.apply(v)).collect()
            } else {
                z.iter().map(|&v| self.hidden.apply(v)).collect()
            };
            if l < last {
                if let Some(m) = &masks {
                    h.iter_mut().zip(&m[l]).for_each(|(v, k)| *v *= k);
                }
            }
            inputs.push(std::mem::replace(&mut x, h));
            pre.push(z);
        }
        Ok(Trace {
            inputs,
            pre,
            masks,
            output: x,
        })
    }

    /// Reverse pass. Adds parameter gradients into `param_grad` and returns the
    /// gradient with respect to the network input.
    pub fn backward_trace(
        &self,
        trace: &Trace,
        output_grad: &[f64],
        param_grad: &mut [f64],
    ) -> Vec<f64> {
        debug_assert_eq!(param_grad.len(), self.params.len());
        debug_assert_eq!(output_grad.len(), self.output_dim());
        let last = self.num_layers() - 1;
        let mut delta = output_grad.to_vec();
        for l in (0..=last).rev() {
            let pre = &trace.pre[l];
            if l == last {
                for (d, &z) in delta.iter_mut().zip(pre) {
                    *d *= self.output.derivative(z);
                }
            } else {
                if let Some(m) = &trace.masks {
                    delta.iter_mut().zip(&m[l]).for_each(|(d, k)| *d *= k);
                }
                for (d, &z) in delta.iter_mut().zip(pre) {
                    *d *= self.hidden.derivative(z);
                }
            }
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let x = &trace.inputs[l];
            let off = self.offsets[l];
            let w = &self.params[off..off + n_in * n_out];
            {
                let g = &mut param_grad[off..off + n_in * n_out + n_out];
                let (gw, gb) = g.split_at_mut(n_in * n_out);
                for (o, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, x, &mut gw[o * n_in..(o + 1) * n_in]);
                    }
                    gb[o] += d;
                }
            }
            let mut next = vec![0.0; n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, &w[o * n_in..(o + 1) * n_in], &mut next);
                }
            }
            delta = next;
        }
        delta
    }

    /// Parameter and input gradients of `output_gradᵀ · net(input)`.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if output_grad.len() != self.output_dim() {
            return Err(ClueError::dims(
                "output gradient",
                self.output_dim(),
                output_grad.len(),
            ));
        }
        let trace = self.forward_trace(input, None)?;
        let mut grad = vec![0.0; self.params.len()];
        let input_grad = self.backward_trace(&trace, output_grad, &mut grad);
        Ok((grad, input_grad))
    }

    /// Samples inverted-dropout masks for every hidden layer.
    pub fn sample_dropout(&self, rate: f64, rng: &mut Rng) -> DropoutMasks {
        let keep = 1.0 - rate;
        self.sizes[1..self.sizes.len() - 1]
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect()
    }

    fn affine(&self, l: usize, x: &[f64]) -> Vec<f64> {
        let n_in = self.sizes[l];
        let w = self.weights(l);
        self.bias(l)
            .iter()
            .enumerate()
            .map(|(o, &b)| b + dot(&w[o * n_in..(o + 1) * n_in], x))
            .collect()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(ClueError::dims(
                "network input",
                self.input_dim(),
                input.len(),
            ));
        }
        Ok(())
    }
}
