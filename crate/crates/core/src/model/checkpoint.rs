//! Binary checkpoints: 4-byte magic, `u32` version, `u32`-length JSON
//! header, `u32` tensor count, then per tensor a `u16`-length name, `u32`
//! rows, `u32` cols and little-endian `f32` values. All integers are
//! little-endian.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{LoraAdapter, ModelConfig, Params, Scalar, ToyModel};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"WAHM";
pub const ADAPTER_MAGIC: &[u8; 4] = b"WAHL";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterHeader {
    rank: usize,
    alpha: f64,
    dim: usize,
    blocks: usize,
}

fn encode<T: Scalar>(magic: &[u8; 4], header: &[u8], names: &[String], tensors: &[&Array2<T>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in names.iter().zip(tensors) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
        for v in t.iter() {
            out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!("truncated {what}: expected {n} bytes, found {}", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<&'a [u8]> {
        let m = self.take(4, "magic")?;
        if m != magic {
            return Err(Error::format(
                self.path,
                0,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(m), String::from_utf8_lossy(magic)),
            ));
        }
        let version = self.u32("version")?;
        if version != VERSION {
            return Err(Error::format(self.path, 4, format!("unsupported version {version}")));
        }
        let len = self.u32("header length")? as usize;
        self.take(len, "header")
    }

    /// Fills `tensors` in order, checking names and shapes.
    fn tensors<T: Scalar>(&mut self, names: &[String], tensors: Vec<&mut Array2<T>>) -> Result<()> {
        let count = self.u32("tensor count")? as usize;
        if count != tensors.len() {
            return Err(Error::format(
                self.path,
                (self.pos - 4) as u64,
                format!("expected {} tensors, found {count}", tensors.len()),
            ));
        }
        for (name, t) in names.iter().zip(tensors) {
            let at = self.pos as u64;
            let len = self.u16("name length")? as usize;
            let got = self.take(len, "tensor name")?;
            if got != name.as_bytes() {
                return Err(Error::format(
                    self.path,
                    at,
                    format!("expected tensor `{name}`, found `{}`", String::from_utf8_lossy(got)),
                ));
            }
            let at = self.pos as u64;
            let (rows, cols) = (self.u32("rows")? as usize, self.u32("cols")? as usize);
            if (rows, cols) != t.dim() {
                return Err(Error::format(
                    self.path,
                    at,
                    format!("tensor `{name}` is {rows}x{cols}, expected {:?}", t.dim()),
                ));
            }
            let data = self.take(4 * rows * cols, "tensor data")?;
            for (dst, b) in t.iter_mut().zip(data.chunks_exact(4)) {
                *dst = T::from_f32(f32::from_le_bytes(b.try_into().unwrap())).unwrap();
            }
        }
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn save_model<T: Scalar>(model: &ToyModel<T>, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&model.config)?;
    let bytes = encode(MODEL_MAGIC, &header, &model.params.names(), &model.params.tensors());
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<ToyModel<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { path, bytes: &bytes, pos: 0 };
    let header = r.header(MODEL_MAGIC)?;
    let config: ModelConfig = serde_json::from_slice(header)?;
    config.validate()?;
    let mut params = Params::<T>::init(&config, 0);
    let names = params.names();
    r.tensors(&names, params.tensors_mut())?;
    Ok(ToyModel::from_params(config, params))
}

pub fn save_adapter<T: Scalar>(adapter: &LoraAdapter<T>, path: &Path) -> Result<()> {
    let dim = adapter.blocks.first().map_or(0, |b| b[0].a.ncols());
    let header = serde_json::to_vec(&AdapterHeader {
        rank: adapter.rank,
        alpha: adapter.alpha,
        dim,
        blocks: adapter.blocks.len(),
    })?;
    let bytes = encode(ADAPTER_MAGIC, &header, &adapter.names(), &adapter.tensors());
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_adapter<T: Scalar>(path: &Path) -> Result<LoraAdapter<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { path, bytes: &bytes, pos: 0 };
    let header: AdapterHeader = serde_json::from_slice(r.header(ADAPTER_MAGIC)?)?;
    let zero = |rows, cols| Array2::<T>::zeros((rows, cols));
    let mut adapter = LoraAdapter {
        rank: header.rank,
        alpha: header.alpha,
        blocks: (0..header.blocks)
            .map(|_| {
                std::array::from_fn(|_| super::LoraPair {
                    a: zero(header.rank, header.dim),
                    b: zero(header.dim, header.rank),
                })
            })
            .collect(),
    };
    let names = adapter.names();
    r.tensors(&names, adapter.tensors_mut())?;
    Ok(adapter)
}
