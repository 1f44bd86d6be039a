//! Binary checkpoints.
//!
//! Layout (little-endian): magic `ECKP\x01`, `u32` length + JSON model
//! config, `f64` temperature, `u32` parameter count, then per parameter a
//! `u32` length + UTF-8 name followed by a matrix block; then `u32` spectral
//! state count and per state: name, `u32` |u|, `u32` |v|, the `f64` entries
//! of `u` and `v`, `γ`, cached `σ`, and a `u8` flag followed by a matrix block
//! when the state holds a frozen weight.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::model::Model;
use crate::error::{Error, Result};
use crate::linalg::{read_matrix, read_u32, write_matrix, Matrix};
use crate::reparam::SpectralState;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"ECKP\x01";

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid UTF-8 name: {e}")))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| read_f64(r)).collect()
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &Model) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    write_str(w, &serde_json::to_string(model.config())?)?;
    w.write_all(&model.temperature().to_le_bytes())?;
    w.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for p in model.params() {
        write_str(w, &p.name)?;
        write_matrix(w, &p.value)?;
    }
    let states = model.spectral_states();
    w.write_all(&(states.len() as u32).to_le_bytes())?;
    for (name, s) in states {
        write_str(w, name)?;
        w.write_all(&(s.u.len() as u32).to_le_bytes())?;
        w.write_all(&(s.v.len() as u32).to_le_bytes())?;
        for x in s.u.iter().chain(&s.v).chain([&s.gamma, &s.sigma_cached]) {
            w.write_all(&x.to_le_bytes())?;
        }
        match s.frozen_weight() {
            Some(m) => {
                w.write_all(&[1])?;
                write_matrix(w, m)?;
            }
            None => w.write_all(&[0])?,
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Model> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let cfg: ModelConfig = serde_json::from_str(&read_str(r)?)?;
    let temperature = read_f64(r)?;
    let n = read_u32(r)? as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let name = read_str(r)?;
        params.push((name, read_matrix(r)?));
    }
    let n_states = read_u32(r)? as usize;
    let mut states = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        let name = read_str(r)?;
        let nu = read_u32(r)? as usize;
        let nv = read_u32(r)? as usize;
        let u = read_f64s(r, nu)?;
        let v = read_f64s(r, nv)?;
        let gamma = read_f64(r)?;
        let sigma = read_f64(r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let frozen: Option<Matrix> = match flag[0] {
            0 => None,
            1 => Some(read_matrix(r)?),
            f => return Err(Error::Format(format!("bad frozen flag {f}"))),
        };
        states.push((name, SpectralState::from_parts(u, v, gamma, sigma, frozen)));
    }
    Model::restore(cfg, temperature, params, states)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
