//! Frozen-pretrained-plus-controller score parameterizations.
//!
//! Five composition modes share one container:
//! - `sidenet`: gated side network on the pretrained reverse mean,
//!   `eps = eps0(x) + lambda * s(mu0(x))`;
//! - `sidenet-np`: ungated additive residual, `eps = eps0(x) + lambda * sbar(x)`;
//! - `lora`: low-rank deltas merged into the frozen core's dense layers;
//! - `joint`: the LoRA-adapted core replaces the frozen core inside the gated
//!   form, trained together with the side network;
//! - `separate`: LoRA delta and side correction are both computed against the
//!   plain pretrained model and summed.
//!
//! In every mode the pretrained parameters are never touched by optimizer
//! steps; the trainable vector is the adapter/side-net parameters only.

mod checkpoint;
mod fourier;
mod lora;
mod sidenet;

pub use checkpoint::{load_composed, read_composed, save_composed, write_composed};
pub use fourier::{gaussian_density, kernel_mc_estimate, phi, rho, FourierBasis};
pub use lora::{lora_backward, lora_forward, lora_predict, LoraAdapter, LoraSet};
pub use sidenet::SideNet;

use crate::diffusion::{eps_coef, EpsModel, ScoreModel};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComposeMode {
    /// Pretrained model alone (a freshly loaded checkpoint before any
    /// controller is attached).
    CoreOnly,
    SideNet,
    SideNetUngated,
    LoraOnly,
    Joint,
    Separate,
}

impl ComposeMode {
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "core" => ComposeMode::CoreOnly,
            "sidenet" => ComposeMode::SideNet,
            "sidenet-np" => ComposeMode::SideNetUngated,
            "lora" => ComposeMode::LoraOnly,
            "joint" => ComposeMode::Joint,
            "separate" => ComposeMode::Separate,
            other => {
                return Err(Error::Config(format!(
                    "unknown parameterization {other:?}"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ComposeMode::CoreOnly => "core",
            ComposeMode::SideNet => "sidenet",
            ComposeMode::SideNetUngated => "sidenet-np",
            ComposeMode::LoraOnly => "lora",
            ComposeMode::Joint => "joint",
            ComposeMode::Separate => "separate",
        }
    }

    pub fn has_side(&self) -> bool {
        matches!(
            self,
            ComposeMode::SideNet | ComposeMode::SideNetUngated | ComposeMode::Joint | ComposeMode::Separate
        )
    }

    pub fn has_lora(&self) -> bool {
        matches!(
            self,
            ComposeMode::LoraOnly | ComposeMode::Joint | ComposeMode::Separate
        )
    }

    /// Gray-box modes never touch the core even indirectly.
    pub fn is_graybox(&self) -> bool {
        matches!(self, ComposeMode::SideNet | ComposeMode::SideNetUngated)
    }

    pub(crate) fn tag(&self) -> u8 {
        match self {
            ComposeMode::CoreOnly => 0,
            ComposeMode::SideNet => 1,
            ComposeMode::SideNetUngated => 2,
            ComposeMode::LoraOnly => 3,
            ComposeMode::Joint => 4,
            ComposeMode::Separate => 5,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => ComposeMode::CoreOnly,
            1 => ComposeMode::SideNet,
            2 => ComposeMode::SideNetUngated,
            3 => ComposeMode::LoraOnly,
            4 => ComposeMode::Joint,
            5 => ComposeMode::Separate,
            other => return Err(Error::Checkpoint(format!("unknown mode tag {other}"))),
        })
    }
}

/// Controller hyperparameters.
#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub side_hidden: Vec<usize>,
    pub lora_rank: usize,
    pub lora_scale: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            side_hidden: vec![32, 32],
            lora_rank: 4,
            lora_scale: 1.0,
        }
    }
}

/// Frozen pretrained score model plus optional adapters and side network.
#[derive(Debug, Clone)]
pub struct ComposedModel {
    pretrained: ScoreModel,
    pub sched: NoiseSchedule,
    pub lora: Option<LoraSet>,
    pub side: Option<SideNet>,
    pub lambda_model: f64,
    pub mode: ComposeMode,
}

impl ComposedModel {
    pub fn new(
        pretrained: ScoreModel,
        sched: NoiseSchedule,
        mode: ComposeMode,
        lambda_model: f64,
        cfg: &ControllerConfig,
        rng: &mut Stream,
    ) -> Result<Self> {
        if lambda_model < 0.0 {
            return Err(Error::Config("lambda_model must be >= 0".into()));
        }
        if pretrained.t_horizon != sched.horizon() {
            return Err(Error::Config("model/schedule horizon mismatch".into()));
        }
        let side = if mode.has_side() {
            Some(SideNet::new(
                pretrained.dim,
                pretrained.t_horizon,
                pretrained.n_cond,
                pretrained.embed_dim,
                pretrained.cond_dim,
                &cfg.side_hidden,
                &mut rng.derive(1),
            )?)
        } else {
            None
        };
        let lora = if mode.has_lora() {
            Some(LoraSet::for_model(
                &pretrained,
                cfg.lora_rank,
                cfg.lora_scale,
                &mut rng.derive(2),
            )?)
        } else {
            None
        };
        Ok(Self {
            pretrained,
            sched,
            lora,
            side,
            lambda_model,
            mode,
        })
    }

    pub fn pretrained(&self) -> &ScoreModel {
        &self.pretrained
    }

    /// Bytes of the frozen core, for tamper checks.
    pub fn core_param_bytes(&self) -> Vec<u8> {
        self.pretrained
            .params()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    fn side_ref(&self) -> Result<&SideNet> {
        self.side
            .as_ref()
            .ok_or_else(|| Error::Config(format!("mode {} needs a side network", self.mode.name())))
    }

    fn lora_ref(&self) -> Result<&LoraSet> {
        self.lora
            .as_ref()
            .ok_or_else(|| Error::Config(format!("mode {} needs lora adapters", self.mode.name())))
    }

    fn step_consts(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.sched.check_step(t)?;
        let k1 = (1.0 - self.sched.alpha_bar(t)).sqrt() / self.sched.beta(t);
        let k2 = self.sched.alpha(t).sqrt();
        let coef = eps_coef(&self.sched, t);
        Ok((k1, k2, coef))
    }

    fn reverse_mean_from(&self, x: &[f64], eps: &[f64], t: usize) -> Vec<f64> {
        let inv_sqrt_a = 1.0 / self.sched.alpha(t).sqrt();
        let coef = eps_coef(&self.sched, t);
        x.iter()
            .zip(eps)
            .map(|(xi, e)| xi * inv_sqrt_a - coef * e)
            .collect()
    }

    /// The side correction `s = -z e_core(mu) - k1 (z mu + k2 (1-z) h)`
    /// evaluated with `mu` as the side-net input.
    fn gated_value(
        &self,
        e_core_mu: &[f64],
        mu: &[f64],
        z: f64,
        h: &[f64],
        k1: f64,
        k2: f64,
    ) -> Vec<f64> {
        e_core_mu
            .iter()
            .zip(mu.iter().zip(h))
            .map(|(e, (m, hv))| -z * e - k1 * (z * m + k2 * (1.0 - z) * hv))
            .collect()
    }

    fn core_predict(&self, x: &[f64], c: Option<usize>, t: usize, adapted: bool) -> Result<Vec<f64>> {
        if adapted {
            lora_predict(&self.pretrained, self.lora_ref()?, x, c, t)
        } else {
            self.pretrained.predict(x, c, t)
        }
    }

    /// Full composed prediction for the configured mode.
    pub fn compose_eps(&self, x: &[f64], c: Option<usize>, t: usize) -> Result<Vec<f64>> {
        let lambda = self.lambda_model;
        match self.mode {
            ComposeMode::CoreOnly => self.pretrained.predict(x, c, t),
            ComposeMode::SideNet => {
                let e0x = self.pretrained.predict(x, c, t)?;
                if lambda == 0.0 {
                    return Ok(e0x);
                }
                let (k1, k2, _) = self.step_consts(t)?;
                let mu = self.reverse_mean_from(x, &e0x, t);
                let e0mu = self.pretrained.predict(&mu, c, t)?;
                let (z, h) = self.side_ref()?.forward(&mu, c, t)?;
                let s = self.gated_value(&e0mu, &mu, z, &h, k1, k2);
                Ok(e0x.iter().zip(&s).map(|(e, sv)| e + lambda * sv).collect())
            }
            ComposeMode::SideNetUngated => {
                let e0x = self.pretrained.predict(x, c, t)?;
                if lambda == 0.0 {
                    return Ok(e0x);
                }
                self.sched.check_step(t)?;
                let raw = self.side_ref()?.forward_raw(x, c, t)?;
                Ok(e0x
                    .iter()
                    .zip(&raw[1..])
                    .map(|(e, r)| e + lambda * r)
                    .collect())
            }
            ComposeMode::LoraOnly => self.core_predict(x, c, t, true),
            ComposeMode::Joint => {
                let elx = self.core_predict(x, c, t, true)?;
                if lambda == 0.0 {
                    return Ok(elx);
                }
                let (k1, k2, _) = self.step_consts(t)?;
                let mu = self.reverse_mean_from(x, &elx, t);
                let elmu = self.core_predict(&mu, c, t, true)?;
                let (z, h) = self.side_ref()?.forward(&mu, c, t)?;
                let s = self.gated_value(&elmu, &mu, z, &h, k1, k2);
                Ok(elx.iter().zip(&s).map(|(e, sv)| e + lambda * sv).collect())
            }
            ComposeMode::Separate => {
                let e0x = self.pretrained.predict(x, c, t)?;
                let elx = self.core_predict(x, c, t, true)?;
                let delta: Vec<f64> = elx.iter().zip(&e0x).map(|(a, b)| a - b).collect();
                let mut out: Vec<f64> = e0x.iter().zip(&delta).map(|(e, d)| e + d).collect();
                if lambda != 0.0 {
                    let (k1, k2, _) = self.step_consts(t)?;
                    let mu = self.reverse_mean_from(x, &e0x, t);
                    let e0mu = self.pretrained.predict(&mu, c, t)?;
                    let (z, h) = self.side_ref()?.forward(&mu, c, t)?;
                    let s = self.gated_value(&e0mu, &mu, z, &h, k1, k2);
                    for (o, sv) in out.iter_mut().zip(&s) {
                        *o += lambda * sv;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Scalar upstream on `z` and vector upstream on `h` from the gated form,
    /// given `g = dL/ds`.
    fn gated_head_upstream(
        &self,
        g: &[f64],
        e_core_mu: &[f64],
        mu: &[f64],
        z: f64,
        h: &[f64],
        k1: f64,
        k2: f64,
    ) -> (f64, Vec<f64>) {
        let mut dz = 0.0;
        for (gi, (e, (m, hv))) in g.iter().zip(e_core_mu.iter().zip(mu.iter().zip(h))) {
            dz += gi * (-e - k1 * m + k1 * k2 * hv);
        }
        let dh: Vec<f64> = g.iter().map(|gi| -k1 * k2 * (1.0 - z) * gi).collect();
        (dz, dh)
    }

    fn side_offset(&self) -> usize {
        self.lora.as_ref().map(|l| l.param_count()).unwrap_or(0)
    }

    /// Per-coordinate learning rates over the trainable layout
    /// (LoRA slice first, then the side network).
    pub fn trainable_rates(&self, lr_lora: f64, lr_side: f64) -> Vec<f64> {
        let n_lora = self.lora.as_ref().map(|l| l.param_count()).unwrap_or(0);
        let n_side = self.side.as_ref().map(|s| s.param_count()).unwrap_or(0);
        let mut rates = vec![lr_lora; n_lora];
        rates.extend(vec![lr_side; n_side]);
        rates
    }
}

impl EpsModel for ComposedModel {
    fn data_dim(&self) -> usize {
        self.pretrained.dim
    }

    fn horizon(&self) -> usize {
        self.pretrained.t_horizon
    }

    fn predict(&self, x: &[f64], c: Option<usize>, t: usize) -> Result<Vec<f64>> {
        self.compose_eps(x, c, t)
    }

    fn trainable_len(&self) -> usize {
        self.lora.as_ref().map(|l| l.param_count()).unwrap_or(0)
            + self.side.as_ref().map(|s| s.param_count()).unwrap_or(0)
    }

    fn trainable_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_len());
        if let Some(l) = &self.lora {
            out.extend(l.params());
        }
        if let Some(s) = &self.side {
            out.extend(s.params());
        }
        out
    }

    fn set_trainable_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.trainable_len() {
            return Err(Error::Shape("trainable vector length mismatch".into()));
        }
        let mut ofs = 0;
        if let Some(l) = &mut self.lora {
            let n = l.param_count();
            l.set_params(&params[ofs..ofs + n])?;
            ofs += n;
        }
        if let Some(s) = &mut self.side {
            let n = s.param_count();
            s.set_params(&params[ofs..ofs + n])?;
        }
        Ok(())
    }

    fn accumulate_grad(
        &self,
        x: &[f64],
        c: Option<usize>,
        t: usize,
        upstream: &[f64],
        grads: &mut [f64],
    ) -> Result<()> {
        if grads.len() != self.trainable_len() {
            return Err(Error::Shape("gradient buffer length mismatch".into()));
        }
        let lambda = self.lambda_model;
        match self.mode {
            ComposeMode::CoreOnly => Ok(()),
            ComposeMode::SideNet => {
                if lambda == 0.0 {
                    return Ok(());
                }
                let (k1, k2, _) = self.step_consts(t)?;
                let e0x = self.pretrained.predict(x, c, t)?;
                let mu = self.reverse_mean_from(x, &e0x, t);
                let e0mu = self.pretrained.predict(&mu, c, t)?;
                let side = self.side_ref()?;
                let (z, h) = side.forward(&mu, c, t)?;
                let g: Vec<f64> = upstream.iter().map(|u| lambda * u).collect();
                let (dz, dh) = self.gated_head_upstream(&g, &e0mu, &mu, z, &h, k1, k2);
                let mut up_raw = Vec::with_capacity(1 + dh.len());
                up_raw.push(dz);
                up_raw.extend(dh);
                let ofs = self.side_offset();
                side.backward(&mu, c, t, &up_raw, &mut grads[ofs..])?;
                Ok(())
            }
            ComposeMode::SideNetUngated => {
                if lambda == 0.0 {
                    return Ok(());
                }
                self.sched.check_step(t)?;
                let side = self.side_ref()?;
                let mut up_raw = vec![0.0; 1 + upstream.len()];
                for (slot, u) in up_raw[1..].iter_mut().zip(upstream) {
                    *slot = lambda * u;
                }
                let ofs = self.side_offset();
                side.backward(x, c, t, &up_raw, &mut grads[ofs..])?;
                Ok(())
            }
            ComposeMode::LoraOnly => {
                let lora = self.lora_ref()?;
                lora_backward(&self.pretrained, lora, x, c, t, upstream, grads)?;
                Ok(())
            }
            ComposeMode::Joint => {
                let lora = self.lora_ref()?;
                let side = self.side_ref()?;
                let n_lora = lora.param_count();
                let (lora_grads, side_grads) = grads.split_at_mut(n_lora);
                if lambda == 0.0 {
                    lora_backward(&self.pretrained, lora, x, c, t, upstream, lora_grads)?;
                    return Ok(());
                }
                let (k1, k2, coef) = self.step_consts(t)?;
                let elx = lora_predict(&self.pretrained, lora, x, c, t)?;
                let mu = self.reverse_mean_from(x, &elx, t);
                let elmu = lora_predict(&self.pretrained, lora, &mu, c, t)?;
                let (z, h) = side.forward(&mu, c, t)?;
                let g: Vec<f64> = upstream.iter().map(|u| lambda * u).collect();
                // Side-network heads.
                let (dz, dh) = self.gated_head_upstream(&g, &elmu, &mu, z, &h, k1, k2);
                let mut up_raw = Vec::with_capacity(1 + dh.len());
                up_raw.push(dz);
                up_raw.extend(dh);
                let d_mu_side = side.backward(&mu, c, t, &up_raw, side_grads)?;
                // Core evaluated at mu.
                let d_elmu: Vec<f64> = g.iter().map(|gi| -z * gi).collect();
                let d_mu_core =
                    lora_backward(&self.pretrained, lora, &mu, c, t, &d_elmu, lora_grads)?;
                // Total gradient flowing into mu, including the explicit
                // -k1 z mu term of the correction.
                let d_mu: Vec<f64> = d_mu_side
                    .iter()
                    .zip(d_mu_core.iter().zip(&g))
                    .map(|(a, (b, gi))| a + b - k1 * z * gi)
                    .collect();
                // mu = x / sqrt(alpha) - coef * e_core(x), so the core at x
                // sees the direct upstream minus coef * d_mu.
                let up_ex: Vec<f64> = upstream
                    .iter()
                    .zip(&d_mu)
                    .map(|(u, dm)| u - coef * dm)
                    .collect();
                lora_backward(&self.pretrained, lora, x, c, t, &up_ex, lora_grads)?;
                Ok(())
            }
            ComposeMode::Separate => {
                let lora = self.lora_ref()?;
                let side = self.side_ref()?;
                let n_lora = lora.param_count();
                let (lora_grads, side_grads) = grads.split_at_mut(n_lora);
                // The LoRA delta term.
                lora_backward(&self.pretrained, lora, x, c, t, upstream, lora_grads)?;
                if lambda == 0.0 {
                    return Ok(());
                }
                // The side correction against the plain pretrained core.
                let (k1, k2, _) = self.step_consts(t)?;
                let e0x = self.pretrained.predict(x, c, t)?;
                let mu = self.reverse_mean_from(x, &e0x, t);
                let e0mu = self.pretrained.predict(&mu, c, t)?;
                let (z, h) = side.forward(&mu, c, t)?;
                let g: Vec<f64> = upstream.iter().map(|u| lambda * u).collect();
                let (dz, dh) = self.gated_head_upstream(&g, &e0mu, &mu, z, &h, k1, k2);
                let mut up_raw = Vec::with_capacity(1 + dh.len());
                up_raw.push(dz);
                up_raw.extend(dh);
                side.backward(&mu, c, t, &up_raw, side_grads)?;
                Ok(())
            }
        }
    }
}

/// The standalone side-correction value: `s_theta(mu0, c, t)` given the core
/// evaluated at `mu0`.
pub fn side_correction(
    side: &SideNet,
    sched: &NoiseSchedule,
    eps_core_at_mu: &[f64],
    mu: &[f64],
    c: Option<usize>,
    t: usize,
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    let k1 = (1.0 - sched.alpha_bar(t)).sqrt() / sched.beta(t);
    let k2 = sched.alpha(t).sqrt();
    let (z, h) = side.forward(mu, c, t)?;
    Ok(eps_core_at_mu
        .iter()
        .zip(mu.iter().zip(&h))
        .map(|(e, (m, hv))| -z * e - k1 * (z * m + k2 * (1.0 - z) * hv))
        .collect())
}
