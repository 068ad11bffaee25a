//! Versioned binary checkpoint: header, architecture dims, then a flat
//! little-endian fp64 blob per named weight matrix, with an optional
//! trainer section (optimizer moments, step counter, RNG position) so a
//! training run can resume bit-identically.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::params::{ModelConfig, ModelParams, PARAM_NAMES};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"CLSR";
const VERSION: u32 = 1;

/// Optimizer and bookkeeping state stored alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerExtra {
    /// First-moment estimates, one per weight matrix in [`PARAM_NAMES`] order.
    pub m: Vec<Tensor>,
    /// Second-moment estimates, same order.
    pub v: Vec<Tensor>,
    pub step: u64,
    pub best_metric: f64,
    pub evals_without_improvement: u32,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

fn write_matrix(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    let bytes = name.as_bytes();
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    let (rows, cols) = (t.shape()[0] as u32, t.shape()[1] as u32);
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_matrix(r: &mut impl Read) -> Result<(String, Tensor)> {
    let name_len = read_u32(r)? as usize;
    if name_len > 256 {
        return Err(Error::CheckpointFormat(format!(
            "matrix name length {name_len} is implausible"
        )));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::CheckpointFormat("matrix name is not UTF-8".into()))?;
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((name, Tensor::from_vec(&[rows, cols], data)?))
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    extra: Option<&TrainerExtra>,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for dim in [
        params.config.feat,
        params.config.hidden,
        params.config.embed,
        params.config.proj,
    ] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    let named = params.named();
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, t) in named {
        write_matrix(&mut w, name, t)?;
    }
    match extra {
        None => w.write_all(&[0u8])?,
        Some(extra) => {
            w.write_all(&[1u8])?;
            for (name, t) in PARAM_NAMES.iter().zip(&extra.m) {
                write_matrix(&mut w, &format!("m.{name}"), t)?;
            }
            for (name, t) in PARAM_NAMES.iter().zip(&extra.v) {
                write_matrix(&mut w, &format!("v.{name}"), t)?;
            }
            w.write_all(&extra.step.to_le_bytes())?;
            w.write_all(&extra.best_metric.to_le_bytes())?;
            w.write_all(&extra.evals_without_improvement.to_le_bytes())?;
            w.write_all(&extra.rng_seed)?;
            w.write_all(&extra.rng_word_pos.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Option<TrainerExtra>)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config = ModelConfig {
        feat: read_u32(&mut r)? as usize,
        hidden: read_u32(&mut r)? as usize,
        embed: read_u32(&mut r)? as usize,
        proj: read_u32(&mut r)? as usize,
    };
    let count = read_u32(&mut r)? as usize;
    let expected = ModelParams::expected_shapes(&config);
    if count != expected.len() {
        return Err(Error::CheckpointFormat(format!(
            "expected {} matrices, found {count}",
            expected.len()
        )));
    }
    let mut params = ModelParams::init(&config, 0)?;
    for (name, shape) in &expected {
        let (found_name, tensor) = read_matrix(&mut r)?;
        if found_name != *name {
            return Err(Error::CheckpointFormat(format!(
                "expected matrix `{name}`, found `{found_name}`"
            )));
        }
        if tensor.shape() != &shape[..] {
            return Err(Error::CheckpointMismatch {
                matrix: name.to_string(),
                expected: format!("{shape:?}"),
                found: format!("{:?}", tensor.shape()),
            });
        }
        for (n, slot) in params.named_mut() {
            if n == *name {
                *slot = tensor.clone();
            }
        }
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let extra = if flag[0] == 1 {
        let mut m = Vec::with_capacity(PARAM_NAMES.len());
        for name in PARAM_NAMES {
            let (found, t) = read_matrix(&mut r)?;
            if found != format!("m.{name}") {
                return Err(Error::CheckpointFormat(format!(
                    "expected moment `m.{name}`, found `{found}`"
                )));
            }
            m.push(t);
        }
        let mut v = Vec::with_capacity(PARAM_NAMES.len());
        for name in PARAM_NAMES {
            let (found, t) = read_matrix(&mut r)?;
            if found != format!("v.{name}") {
                return Err(Error::CheckpointFormat(format!(
                    "expected moment `v.{name}`, found `{found}`"
                )));
            }
            v.push(t);
        }
        let step = read_u64(&mut r)?;
        let best_metric = read_f64(&mut r)?;
        let evals = read_u32(&mut r)?;
        let mut rng_seed = [0u8; 32];
        r.read_exact(&mut rng_seed)?;
        let mut pos = [0u8; 16];
        r.read_exact(&mut pos)?;
        Some(TrainerExtra {
            m,
            v,
            step,
            best_metric,
            evals_without_improvement: evals,
            rng_seed,
            rng_word_pos: u128::from_le_bytes(pos),
        })
    } else {
        None
    };
    Ok((params, extra))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_round_trip() {
        let params = ModelParams::init(&ModelConfig::default(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        save_checkpoint(&path, &params, None).unwrap();
        let (loaded, extra) = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
        assert!(extra.is_none());
    }

    #[test]
    fn trainer_state_round_trip_is_bit_identical() {
        let params = ModelParams::init(&ModelConfig::default(), 9).unwrap();
        let extra = TrainerExtra {
            m: params.named().iter().map(|(_, t)| (*t).clone()).collect(),
            v: params
                .named()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
            step: 1234,
            best_metric: 0.125,
            evals_without_improvement: 3,
            rng_seed: [7u8; 32],
            rng_word_pos: 987_654_321,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        save_checkpoint(&path, &params, Some(&extra)).unwrap();
        let (loaded, loaded_extra) = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
        assert_eq!(extra, loaded_extra.unwrap());

        // save -> load -> save produces identical bytes
        let path2 = dir.path().join("s2.ckpt");
        save_checkpoint(&path2, &loaded, load_checkpoint(&path).unwrap().1.as_ref()).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn non_checkpoint_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointFormat(_))
        ));
    }
}
