//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `SPLCKPT\0`, `u32` schema, `u64` step,
//! `u64` optimizer steps, `u32`-length JSON of the training config, then
//! three tensor sections (parameters, first moments, second moments). Each
//! section is a `u32` count followed by `u32` name length, name, `u32` rank,
//! `u64` dims and raw `f64` data per tensor.
//!
//! Randomness is derived from `(seed, step)` and the schedules are pure
//! functions of the step, so the step counter is the whole RNG and schedule
//! state.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

use super::TrainConfig;

pub const MAGIC: &[u8; 8] = b"SPLCKPT\0";
pub const SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub optimizer_steps: u64,
    /// `(name, value)` in store order.
    pub params: Vec<(String, Tensor)>,
    pub first_moments: Vec<Tensor>,
    pub second_moments: Vec<Tensor>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensors<'a>(out: &mut Vec<u8>, items: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>) {
    put_u32(out, items.len() as u32);
    for (name, t) in items {
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(out, d as u64);
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor)>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = self.u32()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(self.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = self.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            out.push((name, t));
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, SCHEMA);
        put_u64(&mut out, self.step);
        put_u64(&mut out, self.optimizer_steps);
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        put_u32(&mut out, cfg.len() as u32);
        out.extend_from_slice(&cfg);
        put_tensors(&mut out, self.params.iter().map(|(n, t)| (n.as_str(), t)));
        put_tensors(&mut out, self.first_moments.iter().map(|t| ("m", t)));
        put_tensors(&mut out, self.second_moments.iter().map(|t| ("v", t)));
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let schema = r.u32()?;
        if schema != SCHEMA {
            return Err(Error::Checkpoint(format!("unsupported schema {schema}, expected {SCHEMA}")));
        }
        let step = r.u64()?;
        let optimizer_steps = r.u64()?;
        let len = r.u32()? as usize;
        let config: TrainConfig =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let params = r.tensors()?;
        let first_moments = r.tensors()?.into_iter().map(|(_, t)| t).collect();
        let second_moments = r.tensors()?.into_iter().map(|(_, t)| t).collect();
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            config,
            step,
            optimizer_steps,
            params,
            first_moments,
            second_moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
