//! Binary checkpoint block for a single MLP.
//!
//! Layout, all integers little-endian:
//! magic `DCKP`, version byte, layer count (u32), then per layer
//! `(in-dim, out-dim, activation tag)` as u32, then every parameter as an
//! IEEE-754 f64 in layer order, weights row-major then bias.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numkit::{Activation, Layer, Matrix, Mlp};

pub const MAGIC: &[u8; 4] = b"DCKP";
pub const VERSION: u8 = 1;

pub fn write_mlp(w: &mut impl Write, mlp: &Mlp) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(mlp.layers().len() as u32).to_le_bytes())?;
    for l in mlp.layers() {
        w.write_all(&(l.in_dim() as u32).to_le_bytes())?;
        w.write_all(&(l.out_dim() as u32).to_le_bytes())?;
        w.write_all(&l.activation.tag().to_le_bytes())?;
    }
    for v in mlp.params() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_mlp(r: &mut impl Read) -> Result<Mlp> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            version[0]
        )));
    }
    let n_layers = read_u32(r)? as usize;
    if n_layers == 0 || n_layers > 1024 {
        return Err(Error::Checkpoint(format!("bad layer count {n_layers}")));
    }
    let mut dims = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_dim = read_u32(r)? as usize;
        let out_dim = read_u32(r)? as usize;
        let act = Activation::from_tag(read_u32(r)?)?;
        dims.push((in_dim, out_dim, act));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (in_dim, out_dim, act) in dims {
        let mut wdata = vec![0.0; in_dim * out_dim];
        for v in wdata.iter_mut() {
            *v = read_f64(r)?;
        }
        let mut bias = vec![0.0; out_dim];
        for v in bias.iter_mut() {
            *v = read_f64(r)?;
        }
        layers.push(Layer {
            weight: Matrix::new(out_dim, in_dim, wdata)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
            bias,
            activation: act,
        });
    }
    Mlp::from_layers(layers).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
