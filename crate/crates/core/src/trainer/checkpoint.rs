//! Model checkpoints.
//!
//! ```text
//! "LDCK" | version: u16 | stage count: u32
//! per stage:  stage id: u32 | tensor count: u32 | tensor*
//! per tensor: name length: u16 | name (UTF-8) | ndim: u8 | dims: u32 * ndim | data: f32 * product(dims)
//! ```
//!
//! All integers and floats are little-endian. Tensors are the stage's named
//! state: parameters followed by batch-norm running statistics.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::NetGraph;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LDCK";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, model: &NetGraph<f32>) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(model.len() as u32).to_le_bytes())?;
    for s in model.stages() {
        let state = s.state();
        w.write_all(&(s.id as u32).to_le_bytes())?;
        w.write_all(&(state.len() as u32).to_le_bytes())?;
        for (name, t) in state {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.ndim() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            w.write_all(&t.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &NetGraph<f32>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model)?;
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }
}

/// Loads a checkpoint into `model`, whose structure must match it.
pub fn read_checkpoint<R: Read>(mut r: R, model: &mut NetGraph<f32>) -> Result<()> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor(&bytes);
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint".into()));
    }
    let version = c.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let stages = c.u32()? as usize;
    if stages != model.len() {
        return Err(Error::Consistency(format!("checkpoint has {stages} stages, model has {}", model.len())));
    }
    for s in model.stages_mut() {
        let id = c.u32()? as usize;
        if id != s.id {
            return Err(Error::Consistency(format!("checkpoint stage {id} where model has {}", s.id)));
        }
        let count = c.u32()? as usize;
        let mut state = s.state_mut();
        if count != state.len() {
            return Err(Error::Consistency(format!("stage {id}: {count} tensors, model expects {}", state.len())));
        }
        for (name, t) in state.iter_mut() {
            let len = c.u16()? as usize;
            let got = std::str::from_utf8(c.take(len)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if got != name {
                return Err(Error::Consistency(format!("stage {id}: tensor {got:?} where model has {name:?}")));
            }
            let ndim = c.take(1)?[0] as usize;
            let dims = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if dims != t.shape() {
                return Err(Error::Consistency(format!("stage {id} {name}: shape {dims:?}, model has {:?}", t.shape())));
            }
            let raw = c.take(t.len() * 4)?;
            for (dst, src) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(src.try_into().expect("four bytes"));
            }
        }
    }
    if !c.0.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", c.0.len())));
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, model: &mut NetGraph<f32>) -> Result<()> {
    read_checkpoint(std::fs::File::open(path)?, model)
}
