//! Checkpoint file: little-endian binary, header {magic, version, config},
//! then named 32-bit float arrays with shapes.
//!
//! Layout (all integers little-endian):
//!   magic      8 bytes  b"NARASR01"
//!   version    u32      currently 1
//!   config     7 x u32  d_model, n_heads, d_ff, encoder_layers,
//!                       decoder_layers, vocab_size, feat_dim
//!              2 x f64  dropout, ctc_weight
//!              1 x u64  encoder attention window (u64::MAX = global)
//!   n_params   u32
//!   per param: u32 name length, UTF-8 name, u32 rank, rank x u32 dims,
//!              numel x f32 data

use super::{Model, ModelConfig, Params};
use crate::error::{NarError, Result};
use crate::numerics::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"NARASR01";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, model: &Model<f32>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    let c = &model.config;
    for v in [
        c.d_model,
        c.n_heads,
        c.d_ff,
        c.encoder_layers,
        c.decoder_layers,
        c.vocab_size,
        c.feat_dim,
    ] {
        f.write_all(&(v as u32).to_le_bytes())?;
    }
    f.write_all(&c.dropout.to_le_bytes())?;
    f.write_all(&c.ctc_weight.to_le_bytes())?;
    // u64::MAX encodes "global attention"
    let window = c.encoder_window.map_or(u64::MAX, |w| w as u64);
    f.write_all(&window.to_le_bytes())?;
    f.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, t) in model.params.iter() {
        f.write_all(&(name.len() as u32).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        f.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NarError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut f)?;
    if version != VERSION {
        return Err(NarError::Checkpoint(format!("unsupported version {version}")));
    }
    let ints: Vec<usize> = (0..7)
        .map(|_| read_u32(&mut f).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let dropout = read_f64(&mut f)?;
    let ctc_weight = read_f64(&mut f)?;
    let window = read_u64(&mut f)?;
    let config = ModelConfig {
        d_model: ints[0],
        n_heads: ints[1],
        d_ff: ints[2],
        encoder_layers: ints[3],
        decoder_layers: ints[4],
        vocab_size: ints[5],
        feat_dim: ints[6],
        dropout,
        ctc_weight,
        encoder_window: if window == u64::MAX { None } else { Some(window as usize) },
    };
    config.validate()?;
    let n_params = read_u32(&mut f)? as usize;
    let mut params = Params::new();
    for _ in 0..n_params {
        let name_len = read_u32(&mut f)? as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| NarError::Checkpoint("non-UTF8 param name".into()))?;
        let rank = read_u32(&mut f)? as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| read_u32(&mut f).map(|v| v as usize))
            .collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(read_f32(&mut f)?);
        }
        params.insert(&name, Tensor::new(shape, data));
    }
    Ok(Model { config, params })
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(f: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn read_u64(f: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    f.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(f: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    f.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
