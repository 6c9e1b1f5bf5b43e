//! Small dense MLP with exact reverse-mode gradients.
//!
//! Parameters are exposed as one flat vector per network, ordered layer by
//! layer as weights (row-major) then bias. The same order is used by the
//! optimizer, the gradient buffers, and the checkpoint format, so a flat
//! index means the same coordinate everywhere.

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z` with post-activation `y` available.
    #[inline]
    fn grad(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Identity),
            other => Err(Error::Checkpoint(format!("unknown activation tag {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub weight: Matrix, // out x in
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Xavier-style init scaled by fan-in.
    pub fn random(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut Stream) -> Self {
        let scale = (1.0 / in_dim as f64).sqrt();
        let weight = Matrix::from_fn(out_dim, in_dim, |_, _| rng.normal() * scale);
        Self {
            weight,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }
}

/// Feed-forward network of dense layers. The final activation is identity by
/// construction so outputs are raw.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Intermediate values from a forward pass, needed for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    /// Post-activation of each layer; last entry is the network output.
    post: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("mlp has at least one layer")
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("mlp needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer dims do not chain: {} -> {}",
                    w[0].out_dim(),
                    w[1].in_dim()
                )));
            }
        }
        if layers.last().unwrap().activation != Activation::Identity {
            return Err(Error::Config("final activation must be identity".into()));
        }
        Ok(Self { layers })
    }

    /// Random init with hidden activation `act` and identity output layer.
    pub fn random(
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        act: Activation,
        rng: &mut Stream,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = in_dim;
        for &h in hidden {
            layers.push(Layer::random(prev, h, act, rng));
            prev = h;
        }
        layers.push(Layer::random(prev, out_dim, Activation::Identity, rng));
        Self::from_layers(layers)
    }

    /// Zero the final layer so the network output starts at exactly zero.
    pub fn zero_final_layer(&mut self) {
        let last = self.layers.last_mut().expect("mlp has layers");
        last.weight.data_mut().fill(0.0);
        last.bias.fill(0.0);
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Flat parameter vector: per layer, weights row-major then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "param vector length {} != {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut ofs = 0;
        for l in &mut self.layers {
            let wn = l.weight.rows() * l.weight.cols();
            l.weight.data_mut().copy_from_slice(&params[ofs..ofs + wn]);
            ofs += wn;
            let bn = l.bias.len();
            l.bias.copy_from_slice(&params[ofs..ofs + bn]);
            ofs += bn;
        }
        Ok(())
    }

    /// Forward pass. Deterministic: identical inputs give bitwise-identical
    /// outputs.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.output().to_vec())
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "mlp input length {} != {}",
                input.len(),
                self.input_dim()
            )));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut cur = input.to_vec();
        for l in &self.layers {
            let mut z = l.weight.matvec(&cur)?;
            for (zi, b) in z.iter_mut().zip(&l.bias) {
                *zi += b;
            }
            let y: Vec<f64> = z.iter().map(|&v| l.activation.apply(v)).collect();
            pre.push(z);
            cur = y.clone();
            post.push(y);
        }
        Ok(Trace { pre, post })
    }

    /// Exact reverse-mode gradients of `<upstream, output>`.
    ///
    /// Accumulates parameter gradients into `grads` (flat layout, `+=`) and
    /// returns the gradient with respect to the input.
    pub fn backward_into(
        &self,
        input: &[f64],
        trace: &Trace,
        upstream: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream length {} != output dim {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        if grads.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "gradient buffer length {} != param count {}",
                grads.len(),
                self.param_count()
            )));
        }
        // Offsets of each layer's parameter slice in the flat vector.
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut ofs = 0;
        for l in &self.layers {
            offsets.push(ofs);
            ofs += l.param_count();
        }

        let mut d_out = upstream.to_vec();
        for (idx, l) in self.layers.iter().enumerate().rev() {
            let z = &trace.pre[idx];
            let y = &trace.post[idx];
            // dz = d_out * act'(z)
            let dz: Vec<f64> = d_out
                .iter()
                .zip(z.iter().zip(y))
                .map(|(&g, (&zi, &yi))| g * l.activation.grad(zi, yi))
                .collect();
            let layer_input: &[f64] = if idx == 0 {
                input
            } else {
                &trace.post[idx - 1]
            };
            let in_dim = l.in_dim();
            let base = offsets[idx];
            // dW[r][c] += dz[r] * x[c]; db[r] += dz[r]
            for (r, &dzr) in dz.iter().enumerate() {
                if dzr != 0.0 {
                    let row = base + r * in_dim;
                    for (c, &xc) in layer_input.iter().enumerate() {
                        grads[row + c] += dzr * xc;
                    }
                }
                grads[base + l.out_dim() * in_dim + r] += dzr;
            }
            // dx = W^T dz
            d_out = l.weight.matvec_t(&dz)?;
        }
        Ok(d_out)
    }

    /// Convenience wrapper: fresh gradient buffer for a single sample.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let trace = self.forward_trace(input)?;
        let mut grads = vec![0.0; self.param_count()];
        let d_input = self.backward_into(input, &trace, upstream, &mut grads)?;
        Ok((grads, d_input))
    }
}
