//! Versioned binary checkpoints for network parameters and optimizer state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes   "JNCTQNET"
//! version  u16       currently 1
//! flags    u8        bit 0: optimizer state present
//! layers   u8        layer count
//! table    per layer: u8 name length, name bytes, u8 ndim, ndim x u32 dims
//! params   per layer in table order: product(dims) x f32
//! opt?     accumulator payloads (same table), then lr, rho, eps as 3 x f64
//! ```
//!
//! Loading validates the table against the fixed architecture, so a
//! checkpoint written for a different shape fails with the offending layer's
//! name rather than scrambled weights.

use crate::net::Params;
use crate::rmsprop::RmsProp;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"JNCTQNET";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("layer '{layer}' has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { layer: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("{0} trailing bytes after checkpoint payload")]
    TrailingBytes(usize),
}

pub fn save_checkpoint(
    params: &Params<f32>,
    opt: Option<&RmsProp<f32>>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(if opt.is_some() { 1 } else { 0 });
    let layers = params.layers();
    buf.push(layers.len() as u8);
    for (name, view) in &layers {
        buf.push(name.len() as u8);
        buf.extend_from_slice(name.as_bytes());
        buf.push(view.ndim() as u8);
        for d in view.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
    }
    write_payloads(params, &mut buf);
    if let Some(o) = opt {
        write_payloads(&o.acc, &mut buf);
        for h in [o.lr as f64, o.rho as f64, o.eps as f64] {
            buf.extend_from_slice(&h.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

fn write_payloads(p: &Params<f32>, buf: &mut Vec<u8>) {
    for (_, view) in p.layers() {
        for v in view.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_payloads(r: &mut Reader<'_>, p: &mut Params<f32>) -> Result<(), CheckpointError> {
    for (_, mut view) in p.layers_mut() {
        for v in view.iter_mut() {
            *v = r.f32()?;
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(Params<f32>, Option<RmsProp<f32>>), CheckpointError> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let flags = r.u8()?;
    let layer_count = r.u8()? as usize;

    let mut expected = Params::<f32>::zeros();
    let expected_layers = expected.layers();
    if layer_count != expected_layers.len() {
        return Err(CheckpointError::ShapeMismatch {
            layer: format!("(table: {layer_count} layers, expected {})", expected_layers.len()),
            found: vec![layer_count],
            expected: vec![expected_layers.len()],
        });
    }
    // Table: names and shapes must match the architecture exactly.
    for (exp_name, exp_view) in &expected_layers {
        let name_len = r.u8()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        if name != *exp_name || dims != exp_view.shape() {
            return Err(CheckpointError::ShapeMismatch {
                layer: name,
                found: dims,
                expected: exp_view.shape().to_vec(),
            });
        }
    }
    drop(expected_layers);

    read_payloads(&mut r, &mut expected)?;
    let params = expected;

    let opt = if flags & 1 != 0 {
        let mut acc = Params::<f32>::zeros();
        read_payloads(&mut r, &mut acc)?;
        let (lr, rho, eps) = (r.f64()?, r.f64()?, r.f64()?);
        let mut o = RmsProp::<f32>::new(lr, rho, eps);
        o.acc = acc;
        Some(o)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok((params, opt))
}

/// Hex SHA-256 of a file, used to fingerprint checkpoints in run manifests.
pub fn file_sha256(path: &Path) -> Result<String, std::io::Error> {
    let bytes = fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}
