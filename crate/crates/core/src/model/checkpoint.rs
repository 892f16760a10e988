//! Parameter checkpoint files.
//!
//! Layout (all little-endian):
//!   - magic `b"SQWVCKP1"` (8 bytes)
//!   - header: u32 x 6 = vocab, embedding, hidden, depth,
//!     variant (0 = input-feeding, 1 = no-input-feeding), reserved 0
//!   - dropout rate as f64 (8 bytes)
//!   - every tensor in canonical enumeration order as raw f32 values
//!     (shapes are implied by the header).

use super::config::{tensor_layout, ModelConfig, Precision, Variant};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SQWVCKP1";

pub fn save<S: Scalar>(path: &Path, params: &ModelParams<S>, cfg: &ModelConfig) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    let variant_code: u32 = match cfg.variant {
        Variant::InputFeeding => 0,
        Variant::NoInputFeeding => 1,
    };
    for v in [
        cfg.vocab_size as u32,
        cfg.embedding_size as u32,
        cfg.hidden_size as u32,
        cfg.depth as u32,
        variant_code,
        0u32,
    ] {
        f.write_all(&v.to_le_bytes())?;
    }
    f.write_all(&cfg.dropout.to_le_bytes())?;
    for (_, t) in params.visit() {
        for v in t.data() {
            f.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelParams<f32>, ModelConfig)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:02x?} in {}",
            magic,
            path.display()
        )));
    }
    let mut u32s = [0u32; 6];
    for v in &mut u32s {
        let mut buf = [0u8; 4];
        f.read_exact(&mut buf)?;
        *v = u32::from_le_bytes(buf);
    }
    let mut dbuf = [0u8; 8];
    f.read_exact(&mut dbuf)?;
    let variant = match u32s[4] {
        0 => Variant::InputFeeding,
        1 => Variant::NoInputFeeding,
        other => return Err(Error::Checkpoint(format!("unknown variant code {other}"))),
    };
    let cfg = ModelConfig {
        vocab_size: u32s[0] as usize,
        embedding_size: u32s[1] as usize,
        hidden_size: u32s[2] as usize,
        depth: u32s[3] as usize,
        variant,
        dropout: f64::from_le_bytes(dbuf),
        precision: Precision::F32,
    };
    cfg.validate()
        .map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;

    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for (name, _, shape) in tensor_layout(&cfg) {
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        f.read_exact(&mut raw).map_err(|_| {
            Error::Checkpoint(format!("truncated while reading tensor {name}"))
        })?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, Tensor::from_flat(&shape, data)?);
    }
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    let params = ModelParams::from_named(&cfg, |name| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    })?;
    Ok((params, cfg))
}
