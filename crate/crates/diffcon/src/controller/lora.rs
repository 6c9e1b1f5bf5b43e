//! Low-rank adapters on the dense layers of a frozen score model.

use crate::diffusion::ScoreModel;
use crate::error::{Error, Result};
use crate::numkit::{Layer, Matrix};
use crate::rng::Stream;

/// One adapted dense layer: `W_eff = W + scale * B * A` with `B` zero-init
/// so the initial delta is exactly zero.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Matrix, // rank x in
    pub b: Matrix, // out x rank
    pub scale: f64,
}

impl LoraAdapter {
    pub fn new(in_dim: usize, out_dim: usize, rank: usize, scale: f64, rng: &mut Stream) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("lora rank must be >= 1".into()));
        }
        let s = (1.0 / in_dim as f64).sqrt();
        Ok(Self {
            a: Matrix::from_fn(rank, in_dim, |_, _| rng.normal() * s),
            b: Matrix::zeros(out_dim, rank),
            scale,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn param_count(&self) -> usize {
        self.a.data().len() + self.b.data().len()
    }
}

/// `(W + scale * B * A) x + bias`, the adapted affine map of one layer (no
/// activation).
pub fn lora_forward(layer: &Layer, adapter: &LoraAdapter, input: &[f64]) -> Result<Vec<f64>> {
    let mut z = layer.weight.matvec(input)?;
    let ax = adapter.a.matvec(input)?;
    let bax = adapter.b.matvec(&ax)?;
    for ((zi, b), delta) in z.iter_mut().zip(&layer.bias).zip(&bax) {
        *zi += b + adapter.scale * delta;
    }
    Ok(z)
}

/// A full adapter stack, one entry per MLP layer of the core.
#[derive(Debug, Clone)]
pub struct LoraSet {
    pub adapters: Vec<LoraAdapter>,
}

impl LoraSet {
    pub fn for_model(core: &ScoreModel, rank: usize, scale: f64, rng: &mut Stream) -> Result<Self> {
        let adapters = core
            .mlp
            .layers()
            .iter()
            .map(|l| LoraAdapter::new(l.in_dim(), l.out_dim(), rank, scale, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { adapters })
    }

    pub fn param_count(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::param_count).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for ad in &self.adapters {
            out.extend_from_slice(ad.a.data());
            out.extend_from_slice(ad.b.data());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape("lora param vector length mismatch".into()));
        }
        let mut ofs = 0;
        for ad in &mut self.adapters {
            let na = ad.a.data().len();
            ad.a.data_mut().copy_from_slice(&params[ofs..ofs + na]);
            ofs += na;
            let nb = ad.b.data().len();
            ad.b.data_mut().copy_from_slice(&params[ofs..ofs + nb]);
            ofs += nb;
        }
        Ok(())
    }
}

/// Forward through the core MLP with adapter deltas; input built by the core
/// (state, time embedding, frozen condition row).
pub fn lora_predict(
    core: &ScoreModel,
    lora: &LoraSet,
    x: &[f64],
    c: Option<usize>,
    t: usize,
) -> Result<Vec<f64>> {
    let (_, _, post) = lora_trace(core, lora, x, c, t)?;
    Ok(post.last().expect("at least one layer").clone())
}

/// Pre/post activations of the adapted forward pass.
fn lora_trace(
    core: &ScoreModel,
    lora: &LoraSet,
    x: &[f64],
    c: Option<usize>,
    t: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if lora.adapters.len() != core.mlp.layers().len() {
        return Err(Error::Shape("adapter count != layer count".into()));
    }
    let input = core_input(core, x, c, t)?;
    let mut pre = Vec::with_capacity(lora.adapters.len());
    let mut post = Vec::with_capacity(lora.adapters.len());
    let mut cur = input.clone();
    for (layer, ad) in core.mlp.layers().iter().zip(&lora.adapters) {
        let z = lora_forward(layer, ad, &cur)?;
        let y: Vec<f64> = z.iter().map(|&v| activation_apply(layer, v)).collect();
        pre.push(z);
        cur = y.clone();
        post.push(y);
    }
    Ok((input, pre, post))
}

fn core_input(core: &ScoreModel, x: &[f64], c: Option<usize>, t: usize) -> Result<Vec<f64>> {
    // ScoreModel::predict builds the identical layout; rebuilt here because
    // the adapted pass owns the layer loop.
    use crate::numkit::time_embed;
    if x.len() != core.dim {
        return Err(Error::Shape(format!(
            "state length {} != data dim {}",
            x.len(),
            core.dim
        )));
    }
    let row = match c {
        None => core.n_cond,
        Some(i) if i < core.n_cond => i,
        Some(i) => {
            return Err(Error::Range(format!(
                "condition {i} outside vocabulary of {}",
                core.n_cond
            )))
        }
    };
    let emb = time_embed(t, core.embed_dim, core.t_horizon)?;
    let mut input = Vec::with_capacity(core.dim + core.embed_dim + core.cond_dim);
    input.extend_from_slice(x);
    input.extend_from_slice(&emb);
    input.extend_from_slice(core.cond_table.row(row));
    Ok(input)
}

fn activation_apply(layer: &Layer, z: f64) -> f64 {
    use crate::numkit::Activation;
    match layer.activation {
        Activation::Tanh => z.tanh(),
        Activation::Relu => z.max(0.0),
        Activation::Identity => z,
    }
}

fn activation_grad(layer: &Layer, z: f64, y: f64) -> f64 {
    use crate::numkit::Activation;
    match layer.activation {
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

/// Backward of `<upstream, lora_predict(...)>` with respect to the adapter
/// parameters only (the core stays frozen). Accumulates into `grads`, laid
/// out per adapter as `A` then `B`, and returns the gradient with respect to
/// the state slice of the input.
pub fn lora_backward(
    core: &ScoreModel,
    lora: &LoraSet,
    x: &[f64],
    c: Option<usize>,
    t: usize,
    upstream: &[f64],
    grads: &mut [f64],
) -> Result<Vec<f64>> {
    if grads.len() != lora.param_count() {
        return Err(Error::Shape("lora grad buffer length mismatch".into()));
    }
    let (input, pre, post) = lora_trace(core, lora, x, c, t)?;
    let mut offsets = Vec::with_capacity(lora.adapters.len());
    let mut ofs = 0;
    for ad in &lora.adapters {
        offsets.push(ofs);
        ofs += ad.param_count();
    }
    let mut d_out = upstream.to_vec();
    for (idx, (layer, ad)) in core
        .mlp
        .layers()
        .iter()
        .zip(&lora.adapters)
        .enumerate()
        .rev()
    {
        let dz: Vec<f64> = d_out
            .iter()
            .zip(pre[idx].iter().zip(&post[idx]))
            .map(|(&g, (&z, &y))| g * activation_grad(layer, z, y))
            .collect();
        let layer_input: &[f64] = if idx == 0 { &input } else { &post[idx - 1] };
        let ax = ad.a.matvec(layer_input)?;
        let bt_dz = ad.b.matvec_t(&dz)?; // rank
        let base = offsets[idx];
        let in_dim = ad.a.cols();
        let rank = ad.rank();
        // dA[r][c] += scale * (B^T dz)[r] * x[c]
        for r in 0..rank {
            let coeff = ad.scale * bt_dz[r];
            if coeff != 0.0 {
                for (cc, &xv) in layer_input.iter().enumerate() {
                    grads[base + r * in_dim + cc] += coeff * xv;
                }
            }
        }
        // dB[o][r] += scale * dz[o] * (A x)[r]
        let b_base = base + rank * in_dim;
        for (o, &dzo) in dz.iter().enumerate() {
            if dzo != 0.0 {
                for (r, &axr) in ax.iter().enumerate() {
                    grads[b_base + o * rank + r] += ad.scale * dzo * axr;
                }
            }
        }
        // dx = W^T dz + scale * A^T (B^T dz)
        let mut dx = layer.weight.matvec_t(&dz)?;
        let at_btdz = ad.a.matvec_t(&bt_dz)?;
        for (v, delta) in dx.iter_mut().zip(&at_btdz) {
            *v += ad.scale * delta;
        }
        d_out = dx;
    }
    Ok(d_out[..core.dim].to_vec())
}
