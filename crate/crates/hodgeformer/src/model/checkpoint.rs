//! Checkpoint container: a small little-endian binary format holding the
//! config (as embedded JSON), every parameter tensor by name, and optional
//! optimizer state.
//!
//! Values are stored as f64 regardless of the model's compute precision —
//! f32 values embed exactly, so save → load → save round-trips are
//! byte-identical. Tensor order is the parameter registration order, which
//! `restore` re-derives from the config and verifies name-by-name.

use std::fs;
use std::path::Path;

use crate::autodiff::Scalar;
use crate::model::{Model, ModelConfig};
use crate::nn::Adam;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"HFCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub config: ModelConfig,
    pub epoch: u64,
    pub tensors: Vec<NamedTensor>,
    pub adam: Option<AdamState>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_values(buf: &mut Vec<u8>, values: impl Iterator<Item = f64>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more of {})",
                self.pos,
                self.data.len()
            )));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what}: invalid utf-8")))
    }
}

pub fn save<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    adam: Option<&Adam<T>>,
    epoch: u64,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_str(&mut buf, &model.config.to_json());
    put_u64(&mut buf, epoch);
    put_u32(&mut buf, model.store.len() as u32);
    for p in model.store.params() {
        let (rows, cols) = model.store.shape(p);
        put_str(&mut buf, model.store.name(p));
        put_u32(&mut buf, rows as u32);
        put_u32(&mut buf, cols as u32);
        put_values(&mut buf, model.store.values(p).iter().map(|&v| v.to_f64()));
    }
    match adam {
        Some(a) => {
            buf.push(1);
            put_u64(&mut buf, a.step_count());
            for (m, v) in a.m.iter().zip(&a.v) {
                put_values(&mut buf, m.iter().map(|&x| x.to_f64()));
                put_values(&mut buf, v.iter().map(|&x| x.to_f64()));
            }
        }
        None => buf.push(0),
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<LoadedCheckpoint> {
    let data = fs::read(path)?;
    let mut c = Cursor {
        data: &data,
        pos: 0,
    };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config_json = c.str("config")?;
    let config: ModelConfig = serde_json::from_str(&config_json)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let epoch = c.u64()?;
    let n = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name = c.str("tensor name")?;
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let values = c.values(rows * cols)?;
        tensors.push(NamedTensor {
            name,
            rows,
            cols,
            values,
        });
    }
    let adam = match c.take(1)?[0] {
        0 => None,
        1 => {
            let t = c.u64()?;
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            for tensor in &tensors {
                let len = tensor.rows * tensor.cols;
                m.push(c.values(len)?);
                v.push(c.values(len)?);
            }
            Some(AdamState { t, m, v })
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "bad optimizer flag {other}"
            )))
        }
    };
    if c.pos != data.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            data.len() - c.pos
        )));
    }
    Ok(LoadedCheckpoint {
        config,
        epoch,
        tensors,
        adam,
    })
}

/// Rebuilds a model (and optimizer, when saved) from a loaded checkpoint,
/// verifying that the stored tensors match the registration the config
/// produces.
pub fn restore<T: Scalar>(ck: &LoadedCheckpoint) -> Result<(Model<T>, Option<Adam<T>>)> {
    let mut model = Model::<T>::new(ck.config.clone())?;
    if model.store.len() != ck.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "config registers {} tensors but file has {}",
            model.store.len(),
            ck.tensors.len()
        )));
    }
    let params: Vec<_> = model.store.params().collect();
    for (p, t) in params.iter().zip(&ck.tensors) {
        if model.store.name(*p) != t.name {
            return Err(Error::Checkpoint(format!(
                "tensor order mismatch: expected {}, file has {}",
                model.store.name(*p),
                t.name
            )));
        }
        if model.store.shape(*p) != (t.rows, t.cols) {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} in file, {:?} registered",
                t.name,
                (t.rows, t.cols),
                model.store.shape(*p)
            )));
        }
        let dst = model.store.values_mut(*p);
        for (d, s) in dst.iter_mut().zip(&t.values) {
            *d = T::from_f64(*s);
        }
    }
    let adam = match &ck.adam {
        None => None,
        Some(state) => {
            let mut adam = Adam::new(&model.store);
            adam.t = state.t;
            for (dst, src) in adam.m.iter_mut().zip(&state.m) {
                dst.clear();
                dst.extend(src.iter().map(|&x| T::from_f64(x)));
            }
            for (dst, src) in adam.v.iter_mut().zip(&state.v) {
                dst.clear();
                dst.extend(src.iter().map(|&x| T::from_f64(x)));
            }
            Some(adam)
        }
    };
    Ok((model, adam))
}
