//! Binary checkpoints: `MST1`, the config echo, every parameter and
//! batch-norm buffer as little-endian `f32`, then a CRC-32 of all
//! preceding bytes.

use std::path::Path;

use mst_core::{Scalar, Tensor, Tracker, TrackerConfig};

use crate::error::{read, write, HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"MST1";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank());
    for &e in t.shape() {
        put_u32(out, e);
    }
    for v in t.data() {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
}

pub fn encode<T: Scalar>(tracker: &Tracker<T>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    let cfg = tracker.cfg.to_text();
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());
    put_u32(&mut out, tracker.store.len());
    for (_, p) in tracker.store.iter() {
        put_tensor(&mut out, &p.name, &p.value);
    }
    let buffers: Vec<_> = tracker.store.buffers().collect();
    put_u32(&mut out, buffers.len());
    for (name, t) in buffers {
        put_tensor(&mut out, name, t);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| HarnessError::Data("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| HarnessError::Data("checkpoint: non-utf8 text".into()))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(&'a str, Tensor<T>)> {
        let name = self.str()?;
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| HarnessError::Data("checkpoint: tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tracker<T>> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..4] != MAGIC {
        return Err(HarnessError::Data("not an MST1 checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(HarnessError::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let cfg = TrackerConfig::parse(r.str()?)?;
    let mut tracker = Tracker::<T>::new(cfg, 0)?;
    let n = r.u32()?;
    if n != tracker.store.len() {
        return Err(HarnessError::Data(format!(
            "checkpoint has {n} parameters, config expects {}",
            tracker.store.len()
        )));
    }
    for _ in 0..n {
        let (name, t) = r.tensor::<T>()?;
        let id = tracker
            .store
            .id(name)
            .ok_or_else(|| HarnessError::Data(format!("checkpoint: unknown parameter {name}")))?;
        let slot = tracker.store.get_mut(id);
        if slot.shape() != t.shape() {
            return Err(HarnessError::Data(format!(
                "checkpoint: {name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    let nb = r.u32()?;
    for _ in 0..nb {
        let (name, t) = r.tensor::<T>()?;
        let slot = tracker
            .store
            .buffer_by_name_mut(name)
            .ok_or_else(|| HarnessError::Data(format!("checkpoint: unknown buffer {name}")))?;
        if slot.shape() != t.shape() {
            return Err(HarnessError::Data(format!("checkpoint: buffer {name} has wrong shape")));
        }
        *slot = t;
    }
    if r.pos != body.len() {
        return Err(HarnessError::Data("checkpoint: trailing bytes".into()));
    }
    Ok(tracker)
}

pub fn save<T: Scalar>(tracker: &Tracker<T>, path: &Path) -> Result<()> {
    write(path, encode(tracker))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Tracker<T>> {
    decode(&read(path)?)
}
