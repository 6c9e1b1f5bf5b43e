//! Composed checkpoints: the numkit block format extended with tagged
//! sections.
//!
//! File layout, integers little-endian:
//! magic `DCKP`, version byte 2, mode byte, then one or more sections, then
//! `lambda_model` as one f64. A section is a 4-byte ASCII tag (`CORE`,
//! `LORA`, `SIDE`), a u64 payload length, and the payload. Sections are
//! absent when the mode omits them. Network payloads embed the plain numkit
//! MLP block plus their dimension header and condition table.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::controller::{ComposeMode, ComposedModel, LoraAdapter, LoraSet, SideNet};
use crate::diffusion::ScoreModel;
use crate::error::{Error, Result};
use crate::numkit::checkpoint::{read_f64, read_u32, read_u64, read_mlp, write_mlp, MAGIC};
use crate::numkit::Matrix;
use crate::schedule::NoiseSchedule;

const COMPOSED_VERSION: u8 = 2;

fn write_section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn score_model_payload(m: &ScoreModel) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for v in [
        m.dim as u32,
        m.t_horizon as u32,
        m.embed_dim as u32,
        m.cond_dim as u32,
        m.n_cond as u32,
    ] {
        buf.write_all(&v.to_le_bytes())?;
    }
    write_mlp(&mut buf, &m.mlp)?;
    for v in m.cond_table.data() {
        buf.write_all(&v.to_le_bytes())?;
    }
    Ok(buf)
}

fn read_score_model(r: &mut impl Read) -> Result<ScoreModel> {
    let dim = read_u32(r)? as usize;
    let t_horizon = read_u32(r)? as usize;
    let embed_dim = read_u32(r)? as usize;
    let cond_dim = read_u32(r)? as usize;
    let n_cond = read_u32(r)? as usize;
    let mlp = read_mlp(r)?;
    let mut table = vec![0.0; (n_cond + 1) * cond_dim];
    for v in table.iter_mut() {
        *v = read_f64(r)?;
    }
    Ok(ScoreModel {
        mlp,
        cond_table: Matrix::new(n_cond + 1, cond_dim, table)
            .map_err(|e| Error::Checkpoint(e.to_string()))?,
        dim,
        t_horizon,
        embed_dim,
        cond_dim,
        n_cond,
    })
}

fn side_net_payload(s: &SideNet) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for v in [
        s.dim as u32,
        s.t_horizon as u32,
        s.embed_dim as u32,
        s.cond_dim as u32,
        s.n_cond as u32,
    ] {
        buf.write_all(&v.to_le_bytes())?;
    }
    write_mlp(&mut buf, &s.mlp)?;
    for v in s.cond_table.data() {
        buf.write_all(&v.to_le_bytes())?;
    }
    Ok(buf)
}

fn read_side_net(r: &mut impl Read) -> Result<SideNet> {
    let dim = read_u32(r)? as usize;
    let t_horizon = read_u32(r)? as usize;
    let embed_dim = read_u32(r)? as usize;
    let cond_dim = read_u32(r)? as usize;
    let n_cond = read_u32(r)? as usize;
    let mlp = read_mlp(r)?;
    let mut table = vec![0.0; (n_cond + 1) * cond_dim];
    for v in table.iter_mut() {
        *v = read_f64(r)?;
    }
    Ok(SideNet {
        mlp,
        cond_table: Matrix::new(n_cond + 1, cond_dim, table)
            .map_err(|e| Error::Checkpoint(e.to_string()))?,
        dim,
        t_horizon,
        embed_dim,
        cond_dim,
        n_cond,
    })
}

fn lora_payload(l: &LoraSet) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.write_all(&(l.adapters.len() as u32).to_le_bytes())?;
    for ad in &l.adapters {
        buf.write_all(&(ad.a.cols() as u32).to_le_bytes())?;
        buf.write_all(&(ad.b.rows() as u32).to_le_bytes())?;
        buf.write_all(&(ad.rank() as u32).to_le_bytes())?;
        buf.write_all(&ad.scale.to_le_bytes())?;
        for v in ad.a.data() {
            buf.write_all(&v.to_le_bytes())?;
        }
        for v in ad.b.data() {
            buf.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(buf)
}

fn read_lora(r: &mut impl Read) -> Result<LoraSet> {
    let n = read_u32(r)? as usize;
    let mut adapters = Vec::with_capacity(n);
    for _ in 0..n {
        let in_dim = read_u32(r)? as usize;
        let out_dim = read_u32(r)? as usize;
        let rank = read_u32(r)? as usize;
        let scale = read_f64(r)?;
        let mut a = vec![0.0; rank * in_dim];
        for v in a.iter_mut() {
            *v = read_f64(r)?;
        }
        let mut b = vec![0.0; out_dim * rank];
        for v in b.iter_mut() {
            *v = read_f64(r)?;
        }
        adapters.push(LoraAdapter {
            a: Matrix::new(rank, in_dim, a).map_err(|e| Error::Checkpoint(e.to_string()))?,
            b: Matrix::new(out_dim, rank, b).map_err(|e| Error::Checkpoint(e.to_string()))?,
            scale,
        });
    }
    Ok(LoraSet { adapters })
}

/// Serializes the composed model (sections present per mode, lambda last).
pub fn write_composed(model: &ComposedModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(COMPOSED_VERSION);
    out.push(model.mode.tag());
    write_section(&mut out, b"CORE", &score_model_payload(model.pretrained())?);
    if let Some(l) = &model.lora {
        write_section(&mut out, b"LORA", &lora_payload(l)?);
    }
    if let Some(s) = &model.side {
        write_section(&mut out, b"SIDE", &side_net_payload(s)?);
    }
    out.extend_from_slice(&model.lambda_model.to_le_bytes());
    Ok(out)
}

/// Parses composed bytes back into a model bound to `sched`.
pub fn read_composed(bytes: &[u8], sched: &NoiseSchedule) -> Result<ComposedModel> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let mut header = [0u8; 2];
    r.read_exact(&mut header)?;
    if header[0] != COMPOSED_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported composed version {}",
            header[0]
        )));
    }
    let mode = ComposeMode::from_tag(header[1])?;
    let mut core = None;
    let mut lora = None;
    let mut side = None;
    // Sections until only the trailing lambda remains.
    while r.len() > 8 {
        let mut tag = [0u8; 4];
        r.read_exact(&mut tag)?;
        let len = read_u64(&mut r)? as usize;
        if len > r.len() {
            return Err(Error::Checkpoint("section length overruns file".into()));
        }
        let (payload, rest) = r.split_at(len);
        r = rest;
        let mut pr = payload;
        match &tag {
            b"CORE" => core = Some(read_score_model(&mut pr)?),
            b"LORA" => lora = Some(read_lora(&mut pr)?),
            b"SIDE" => side = Some(read_side_net(&mut pr)?),
            other => {
                return Err(Error::Checkpoint(format!(
                    "unknown section tag {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        }
    }
    if r.len() != 8 {
        return Err(Error::Checkpoint("missing trailing lambda_model".into()));
    }
    let lambda_model = read_f64(&mut r)?;
    let pretrained = core.ok_or_else(|| Error::Checkpoint("missing CORE section".into()))?;
    if mode.has_lora() && lora.is_none() {
        return Err(Error::Checkpoint("mode requires LORA section".into()));
    }
    if mode.has_side() && side.is_none() {
        return Err(Error::Checkpoint("mode requires SIDE section".into()));
    }
    if pretrained.t_horizon != sched.horizon() {
        return Err(Error::Checkpoint(format!(
            "checkpoint horizon {} != schedule horizon {}",
            pretrained.t_horizon,
            sched.horizon()
        )));
    }
    Ok(ComposedModel {
        pretrained,
        sched: sched.clone(),
        lora,
        side,
        lambda_model,
        mode,
    })
}

// ComposedModel's private fields are constructed here, so read_composed needs
// to live in this module tree; the struct literal above relies on that.

/// Writes atomically via temp-and-rename.
pub fn save_composed(path: &Path, model: &ComposedModel) -> Result<()> {
    let bytes = write_composed(model)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_composed(path: &Path, sched: &NoiseSchedule) -> Result<ComposedModel> {
    let bytes = fs::read(path)?;
    read_composed(&bytes, sched)
}
