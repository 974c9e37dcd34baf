//! Binary checkpoint container.
//!
//! ```text
//! magic    b"SKCK"
//! version  u8
//! config   u32 vocab_size, d_model, n_layers, n_heads, d_ff, max_context; f32 dropout
//! step     u64 training_step
//! count    u32 number of tensors
//! tensor*  u16 name length, name (UTF-8), u8 rank, u32 dims[rank], f32 data[prod(dims)]
//! ```
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{Checkpoint, LmError, ModelConfig};

pub const CHECKPOINT_VERSION: u8 = 1;
const MAGIC: &[u8; 4] = b"SKCK";

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + self.params.len() * 4);
        out.extend_from_slice(MAGIC);
        out.push(CHECKPOINT_VERSION);
        for dim in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_context] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        out.extend_from_slice(&(c.dropout as f32).to_le_bytes());
        out.extend_from_slice(&self.training_step.to_le_bytes());
        out.extend_from_slice(&(self.layout.tensors.len() as u32).to_le_bytes());
        for (info, data) in self.tensors() {
            out.extend_from_slice(&(info.name.len() as u16).to_le_bytes());
            out.extend_from_slice(info.name.as_bytes());
            out.push(info.shape.len() as u8);
            for &dim in &info.shape {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &x in data {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LmError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(LmError::Format("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(LmError::Format(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let dropout = f32::from_le_bytes(r.array()?) as f64;
        let config = ModelConfig {
            vocab_size: dims[0],
            d_model: dims[1],
            n_layers: dims[2],
            n_heads: dims[3],
            d_ff: dims[4],
            max_context: dims[5],
            dropout,
        };
        let training_step = u64::from_le_bytes(r.array()?);
        config.validate()?;
        let expected = super::Layout::new(&config);
        let count = r.u32()? as usize;
        if count != expected.tensors.len() {
            return Err(LmError::Format(format!("expected {} tensors, found {count}", expected.tensors.len())));
        }
        let mut params = vec![0.0; expected.total];
        for info in &expected.tensors {
            let name_len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| LmError::Format("tensor name is not UTF-8".into()))?;
            if name != info.name {
                return Err(LmError::Format(format!("expected tensor {}, found {name}", info.name)));
            }
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            if shape != info.shape {
                return Err(LmError::Format(format!("tensor {name}: shape {shape:?}, expected {:?}", info.shape)));
            }
            for p in &mut params[info.span.range()] {
                let x = f32::from_le_bytes(r.array()?);
                if !x.is_finite() {
                    return Err(LmError::Format(format!("tensor {name} holds a non-finite value")));
                }
                *p = x as f64;
            }
        }
        if r.pos != bytes.len() {
            return Err(LmError::Format("trailing bytes".into()));
        }
        Checkpoint::from_parts(config, params, training_step)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LmError> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LmError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Rounds every parameter through f32, matching what a save/load cycle yields.
    pub fn quantize_to_f32(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LmError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| LmError::Format("truncated".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], LmError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32, LmError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}
