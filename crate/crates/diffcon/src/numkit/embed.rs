//! Sinusoidal step embedding.

use crate::error::{Error, Result};

/// Sinusoidal embedding of the normalized step `t / t_horizon`.
///
/// Layout is `(sin, cos)` pairs over `dim/2` geometric frequencies starting
/// at base frequency 1 with ratio 10, so `dim = 8` covers four decades. The
/// phase is `10^i * t / T`.
pub fn time_embed(t: usize, dim: usize, t_horizon: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 || dim == 0 {
        return Err(Error::Config(format!("embedding dim {dim} must be even")));
    }
    if t_horizon == 0 {
        return Err(Error::Config("horizon must be positive".into()));
    }
    if t > t_horizon {
        return Err(Error::Range(format!("step {t} > horizon {t_horizon}")));
    }
    let x = t as f64 / t_horizon as f64;
    let mut out = Vec::with_capacity(dim);
    let mut freq = 1.0;
    for _ in 0..dim / 2 {
        let phase = freq * x;
        out.push(phase.sin());
        out.push(phase.cos());
        freq *= 10.0;
    }
    Ok(out)
}
