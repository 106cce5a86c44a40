//! Weight and optimizer-state files.
//!
//! Layout: 4-byte magic (`N3DW` weights, `N3DS` state), version `u32` = 1,
//! tensor count `u32`, then per tensor a `u32` name length, UTF-8 name,
//! `u32` rank, `u32` extents and `f32` values. All integers little-endian.

use std::fs;
use std::path::Path;

use super::adadelta::{AdaDeltaConfig, AdaDeltaState};
use super::model::{ModelSpec, NamedTensor, Parameters};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const WEIGHTS_MAGIC: &[u8; 4] = b"N3DW";
const STATE_MAGIC: &[u8; 4] = b"N3DS";
const VERSION: u32 = 1;

fn encode<T: Scalar>(magic: &[u8; 4], tensors: &[NamedTensor<T>]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.tensor.shape().len() as u32).to_le_bytes());
        for &e in t.tensor.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.tensor.data() {
            buf.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt {
                path: self.path.to_path_buf(),
                reason: format!("truncated while reading {what} at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn decode(path: &Path, magic: &[u8; 4], bytes: &[u8]) -> Result<Vec<NamedTensor<f32>>> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = Reader { path, bytes, pos: 0 };
    let m = r.take(4, "magic")?;
    if m != magic {
        return Err(corrupt(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(m)
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| corrupt(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(corrupt(format!("tensor `{name}` has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| corrupt(format!("tensor `{name}` extents overflow")))?;
        let data: Vec<f32> = r
            .take(n, "tensor data")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| corrupt(format!("tensor `{name}`: {e}")))?;
        out.push(NamedTensor { name, tensor });
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save_weights<T: Scalar>(params: &Parameters<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(WEIGHTS_MAGIC, &params.tensors)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Parameters<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Parameters {
        tensors: decode(path, WEIGHTS_MAGIC, &bytes)?,
    })
}

/// Loads weights and checks every tensor against `spec`.
pub fn load_weights_for(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<Parameters<f32>> {
    let params = load_weights(path)?;
    params.check_against(spec)?;
    Ok(params)
}

pub fn save_state<T: Scalar>(
    state: &AdaDeltaState<T>,
    params: &Parameters<T>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(STATE_MAGIC, &state.to_named(params))).map_err(|e| Error::io(path, e))
}

/// Loads optimizer state saved for `params`.
pub fn load_state(path: impl AsRef<Path>, params: &Parameters<f32>) -> Result<AdaDeltaState<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = decode(path, STATE_MAGIC, &bytes)?;
    let n = params.tensors.len();
    if tensors.len() != 2 * n + 2 {
        return Err(Error::Shape(format!(
            "state file holds {} tensors, parameters need {}",
            tensors.len(),
            2 * n + 2
        )));
    }
    let mut sq_grad = Vec::with_capacity(n);
    let mut sq_update = Vec::with_capacity(n);
    for (p, pair) in params.tensors.iter().zip(tensors.chunks_exact(2)) {
        for (t, suffix) in pair.iter().zip(["eg", "ed"]) {
            if t.name != format!("{}.{suffix}", p.name) || t.tensor.shape() != p.tensor.shape() {
                return Err(Error::Shape(format!(
                    "state tensor `{}` does not match parameter `{}`",
                    t.name, p.name
                )));
            }
        }
        sq_grad.push(pair[0].tensor.clone());
        sq_update.push(pair[1].tensor.clone());
    }
    let scalar = |t: &NamedTensor<f32>, name: &str| -> Result<f64> {
        if t.name != name || t.tensor.len() != 1 {
            return Err(Error::Shape(format!("expected scalar `{name}`, found `{}`", t.name)));
        }
        Ok(t.tensor.data()[0] as f64)
    };
    let config = AdaDeltaConfig {
        rho: scalar(&tensors[2 * n], "rho")?,
        eps: scalar(&tensors[2 * n + 1], "eps")?,
    };
    Ok(AdaDeltaState {
        config,
        sq_grad,
        sq_update,
    })
}
