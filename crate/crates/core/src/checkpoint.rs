//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "DFLRCKPT"
//! version  u32
//! config   u32 length + UTF-8 `key = value` text
//! iter     u64
//! adam     u64 step, f64 lr, beta1, beta2, eps
//! records  u32 count, then per record:
//!          u32 name length, name, u32 rank, u64 dims, f64 data
//! ```
//!
//! Records are `param/<name>`, `adam.m/<name>` and `adam.v/<name>` for every
//! parameter in registration order. Loading parses the whole file before
//! building anything, so a bad file never yields a partial state.

use std::path::Path;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::net::{NetworkConfig, NetworkState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DFLRCKPT";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_bits().to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

pub fn encode(state: &NetworkState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend(MAGIC);
    w.u32(VERSION);
    w.str(&state.config().to_kv().to_string());
    w.u64(state.iteration);
    let o = &state.optim;
    w.u64(o.step);
    for v in [o.lr, o.beta1, o.beta2, o.eps] {
        w.f64(v);
    }
    w.u32((3 * state.params.len()) as u32);
    for (i, (name, t)) in state.params.iter().enumerate() {
        w.tensor(&format!("param/{name}"), t);
        w.tensor(&format!("adam.m/{name}"), &o.m[i]);
        w.tensor(&format!("adam.v/{name}"), &o.v[i]);
    }
    w.0
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!(
                "record {name}: rank {rank} too large"
            )));
        }
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|n| {
                n.checked_mul(8)
                    .is_some_and(|b| b <= self.bytes.len() - self.pos)
            })
            .ok_or_else(|| Error::Checkpoint(format!("record {name}: data truncated")))?;
        let data = (0..numel).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok((name, Tensor::new(&shape, data)?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<NetworkState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("magic bytes missing".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "version {version} unsupported (expected {VERSION})"
        )));
    }
    let kv = KvConfig::from_text(&r.str()?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let config = NetworkConfig::default()
        .apply_kv(&kv)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let iteration = r.u64()?;
    let step = r.u64()?;
    let hyper = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        records.push(r.tensor()?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    let mut state = NetworkState::new(&config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if count != 3 * state.params.len() {
        return Err(Error::Checkpoint(format!(
            "{count} records for {} parameters",
            state.params.len()
        )));
    }
    let ids: Vec<_> = state.params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let name = state.params.name(id).to_string();
        let expect = [
            format!("param/{name}"),
            format!("adam.m/{name}"),
            format!("adam.v/{name}"),
        ];
        let shape = state.params.get(id).shape().to_vec();
        for (k, want) in expect.iter().enumerate() {
            let (got, t) = &records[3 * i + k];
            if got != want || t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "record {got} {:?}, expected {want} {shape:?}",
                    t.shape()
                )));
            }
        }
        *state.params.get_mut(id) = records[3 * i].1.clone();
        state.optim.m[i] = records[3 * i + 1].1.clone();
        state.optim.v[i] = records[3 * i + 2].1.clone();
    }
    state.iteration = iteration;
    state.optim.step = step;
    [
        state.optim.lr,
        state.optim.beta1,
        state.optim.beta2,
        state.optim.eps,
    ] = hyper;
    Ok(state)
}

/// Writes through a sibling temporary file so an interrupted save leaves any
/// previous checkpoint intact.
pub fn save(state: &NetworkState, path: &Path) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, encode(state))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<NetworkState> {
    decode(&std::fs::read(path)?)
}
