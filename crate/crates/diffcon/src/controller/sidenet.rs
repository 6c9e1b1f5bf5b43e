//! The gated side network `s = (z, h)`.
//!
//! One shared MLP reads `concat(state, time_embed(t), condition row)` and
//! emits `1 + d` channels: channel 0 is the scalar gate `z`, the remaining
//! `d` channels are `h`. The final layer is zero-initialized so `z = 0` and
//! `h = 0` at init, which makes every composed model start exactly at the
//! pretrained output.

use crate::error::{Error, Result};
use crate::numkit::{time_embed, Activation, Matrix, Mlp};
use crate::rng::Stream;

#[derive(Debug, Clone)]
pub struct SideNet {
    pub mlp: Mlp,           // in = dim + embed_dim + cond_dim, out = 1 + dim
    pub cond_table: Matrix, // (n_cond + 1) x cond_dim
    pub dim: usize,
    pub t_horizon: usize,
    pub embed_dim: usize,
    pub cond_dim: usize,
    pub n_cond: usize,
}

impl SideNet {
    pub fn new(
        dim: usize,
        t_horizon: usize,
        n_cond: usize,
        embed_dim: usize,
        cond_dim: usize,
        hidden: &[usize],
        rng: &mut Stream,
    ) -> Result<Self> {
        let input_dim = dim + embed_dim + cond_dim;
        let mut mlp = Mlp::random(input_dim, hidden, 1 + dim, Activation::Tanh, rng)?;
        mlp.zero_final_layer();
        let cond_table = Matrix::from_fn(n_cond + 1, cond_dim, |_, _| rng.normal() * 0.1);
        Ok(Self {
            mlp,
            cond_table,
            dim,
            t_horizon,
            embed_dim,
            cond_dim,
            n_cond,
        })
    }

    fn cond_row(&self, c: Option<usize>) -> Result<usize> {
        match c {
            None => Ok(self.n_cond),
            Some(i) if i < self.n_cond => Ok(i),
            Some(i) => Err(Error::Range(format!(
                "condition {i} outside vocabulary of {}",
                self.n_cond
            ))),
        }
    }

    fn build_input(&self, state: &[f64], c: Option<usize>, t: usize) -> Result<Vec<f64>> {
        if state.len() != self.dim {
            return Err(Error::Shape(format!(
                "side-net state length {} != {}",
                state.len(),
                self.dim
            )));
        }
        let row = self.cond_row(c)?;
        let emb = time_embed(t, self.embed_dim, self.t_horizon)?;
        let mut input = Vec::with_capacity(self.dim + self.embed_dim + self.cond_dim);
        input.extend_from_slice(state);
        input.extend_from_slice(&emb);
        input.extend_from_slice(self.cond_table.row(row));
        Ok(input)
    }

    /// All `1 + d` output channels.
    pub fn forward_raw(&self, state: &[f64], c: Option<usize>, t: usize) -> Result<Vec<f64>> {
        let input = self.build_input(state, c, t)?;
        self.mlp.forward(&input)
    }

    /// `(z, h)` split.
    pub fn forward(&self, state: &[f64], c: Option<usize>, t: usize) -> Result<(f64, Vec<f64>)> {
        let raw = self.forward_raw(state, c, t)?;
        Ok((raw[0], raw[1..].to_vec()))
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count() + self.cond_table.data().len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.mlp.params();
        p.extend_from_slice(self.cond_table.data());
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape("side-net param vector length mismatch".into()));
        }
        let n_mlp = self.mlp.param_count();
        self.mlp.set_params(&params[..n_mlp])?;
        self.cond_table.data_mut().copy_from_slice(&params[n_mlp..]);
        Ok(())
    }

    /// Backward of `<up_raw, forward_raw(state, c, t)>`; accumulates into
    /// `grads` (length `param_count`) and returns the gradient with respect
    /// to the state slice of the input.
    pub fn backward(
        &self,
        state: &[f64],
        c: Option<usize>,
        t: usize,
        up_raw: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        let input = self.build_input(state, c, t)?;
        let trace = self.mlp.forward_trace(&input)?;
        let n_mlp = self.mlp.param_count();
        let d_input = self
            .mlp
            .backward_into(&input, &trace, up_raw, &mut grads[..n_mlp])?;
        let row = self.cond_row(c)?;
        let tail = &d_input[self.dim + self.embed_dim..];
        let base = n_mlp + row * self.cond_dim;
        for (i, g) in tail.iter().enumerate() {
            grads[base + i] += g;
        }
        Ok(d_input[..self.dim].to_vec())
    }
}
