//! Binary checkpoints of the full training state.
//!
//! Layout (little-endian):
//!
//! ```text
//! "RLCK" | version u32 | config_len u32 | config text (UTF-8) | records u64
//! per record: name_len u32 | name | dtype u8 | rank u32 | rank × dim u64 | payload
//! ```
//!
//! dtype 0 is f64, 1 is f32, 2 is u64. Parameters are stored under
//! `param/<name>`, Adam moments under `adam.m/<name>` and `adam.v/<name>`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use super::model::Model;
use super::train::{Adam, Trainer};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
enum Payload {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U64(Vec<u64>),
}

#[derive(Clone, Debug, PartialEq)]
struct Record {
    name: String,
    dims: Vec<u64>,
    payload: Payload,
}

impl Record {
    fn tensor(name: String, t: &Tensor) -> Self {
        Self { name, dims: t.shape().iter().map(|&d| d as u64).collect(), payload: Payload::F64(t.values().to_vec()) }
    }

    fn u64s(name: &str, v: Vec<u64>) -> Self {
        Self { name: name.into(), dims: vec![v.len() as u64], payload: Payload::U64(v) }
    }

    fn f64s(name: &str, v: Vec<f64>) -> Self {
        Self { name: name.into(), dims: vec![v.len() as u64], payload: Payload::F64(v) }
    }
}

fn encode(config: &str, records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        let code: u8 = match r.payload {
            Payload::F64(_) => 0,
            Payload::F32(_) => 1,
            Payload::U64(_) => 2,
        };
        out.push(code);
        out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
        for d in &r.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &r.payload {
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("non-UTF-8 text in checkpoint".into()))
    }
}

fn decode(bytes: &[u8]) -> Result<(String, Vec<Record>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::Corrupt("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let len = c.u32()? as usize;
    let config = c.string(len)?;
    let count = c.u64()?;
    let mut records = Vec::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = c.string(len)?;
        let code = c.take(1)?[0];
        let rank = c.u32()? as usize;
        let dims = (0..rank).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Corrupt("dims overflow".into()))?
            as usize;
        let payload = match code {
            0 => Payload::F64(c.take(n.saturating_mul(8))?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()),
            1 => Payload::F32(c.take(n.saturating_mul(4))?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
            2 => Payload::U64(c.take(n.saturating_mul(8))?.chunks_exact(8).map(|b| u64::from_le_bytes(b.try_into().unwrap())).collect()),
            other => return Err(Error::Corrupt(format!("unknown dtype code {other} for {name}"))),
        };
        records.push(Record { name, dims, payload });
    }
    if c.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes after last record", bytes.len() - c.pos)));
    }
    Ok((config, records))
}

fn records_of(t: &Trainer) -> Vec<Record> {
    let store = &t.model.store;
    let mut out = Vec::new();
    for (name, tensor) in store.iter() {
        out.push(Record::tensor(format!("param/{name}"), tensor));
    }
    for ((name, _), (m, v)) in store.iter().zip(t.adam.m.iter().zip(&t.adam.v)) {
        out.push(Record::tensor(format!("adam.m/{name}"), m));
        out.push(Record::tensor(format!("adam.v/{name}"), v));
    }
    out.push(Record::u64s("adam.t", vec![t.adam.t]));
    let cb = &t.model.codebook;
    out.push(Record::tensor("codebook/vectors".into(), &cb.vectors));
    out.push(Record::tensor("codebook/ema_sums".into(), &cb.ema_sums));
    out.push(Record::f64s("codebook/ema_counts", cb.ema_counts.clone()));
    out.push(Record::u64s("codebook/idle_steps", cb.idle_steps.clone()));
    out.push(Record::u64s("codebook/usage", cb.usage.clone()));
    out.push(Record::u64s("step", vec![t.step]));
    let seed = t.rng.get_seed();
    let mut rng = seed.chunks_exact(8).map(|b| u64::from_le_bytes(b.try_into().unwrap())).collect::<Vec<_>>();
    let pos = t.rng.get_word_pos();
    rng.extend([t.rng.get_stream(), pos as u64, (pos >> 64) as u64]);
    out.push(Record::u64s("rng", rng));
    out
}

/// Writes the complete training state. The file is written next to `path`
/// and renamed into place.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let bytes = encode(&trainer.model.config.to_text(), &records_of(trainer));
    let tmp = path.with_extension("rlck.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path)?;
    let (config_text, records) = decode(&bytes)?;
    let config = Config::parse(&config_text)?;
    let mut map: HashMap<String, Record> = HashMap::new();
    for r in records {
        if let Some(prev) = map.insert(r.name.clone(), r) {
            return Err(Error::Corrupt(format!("duplicate record {}", prev.name)));
        }
    }
    let mut take = |name: &str| map.remove(name).ok_or_else(|| Error::Corrupt(format!("missing record {name}")));
    let as_f64 = |r: Record| -> Result<(Vec<usize>, Vec<f64>)> {
        let dims = r.dims.iter().map(|&d| d as usize).collect();
        match r.payload {
            Payload::F64(v) => Ok((dims, v)),
            Payload::F32(v) => Ok((dims, v.into_iter().map(f64::from).collect())),
            Payload::U64(_) => Err(Error::Corrupt(format!("{} holds integers, expected floats", r.name))),
        }
    };
    let as_u64 = |r: Record| -> Result<Vec<u64>> {
        match r.payload {
            Payload::U64(v) => Ok(v),
            _ => Err(Error::Corrupt(format!("{} holds floats, expected integers", r.name))),
        }
    };
    let tensor_like = |r: Record, like: &Tensor| -> Result<Tensor> {
        let name = r.name.clone();
        let (dims, v) = as_f64(r)?;
        if dims != like.shape() {
            return Err(Error::Corrupt(format!("{name} has shape {dims:?}, model expects {:?}", like.shape())));
        }
        Tensor::new(&dims, v)
    };

    let mut model = Model::new(&config)?;
    let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
    let mut adam = Adam::new(&model.store);
    for (i, name) in names.iter().enumerate() {
        let p = tensor_like(take(&format!("param/{name}"))?, &model.store.tensors()[i])?;
        model.store.tensors_mut()[i] = p;
        adam.m[i] = tensor_like(take(&format!("adam.m/{name}"))?, &adam.m[i])?;
        adam.v[i] = tensor_like(take(&format!("adam.v/{name}"))?, &adam.v[i])?;
    }
    adam.t = single(as_u64(take("adam.t")?)?)?;

    let cb = &mut model.codebook;
    let m = cb.size();
    cb.vectors = tensor_like(take("codebook/vectors")?, &cb.vectors)?;
    cb.ema_sums = tensor_like(take("codebook/ema_sums")?, &cb.ema_sums)?;
    cb.ema_counts = sized(as_f64(take("codebook/ema_counts")?)?.1, m, "ema_counts")?;
    cb.idle_steps = sized(as_u64(take("codebook/idle_steps")?)?, m, "idle_steps")?;
    cb.usage = sized(as_u64(take("codebook/usage")?)?, m, "usage")?;

    let step = single(as_u64(take("step")?)?)?;
    let rng_state = sized(as_u64(take("rng")?)?, 7, "rng")?;
    let mut seed = [0u8; 32];
    for (chunk, w) in seed.chunks_exact_mut(8).zip(&rng_state[..4]) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(rng_state[4]);
    rng.set_word_pos(u128::from(rng_state[5]) | (u128::from(rng_state[6]) << 64));
    if let Some(extra) = map.keys().next() {
        return Err(Error::Corrupt(format!("unexpected record {extra}")));
    }
    Ok(Trainer::from_parts(model, adam, step, rng))
}

fn single(v: Vec<u64>) -> Result<u64> {
    match v[..] {
        [x] => Ok(x),
        _ => Err(Error::Corrupt(format!("expected one value, got {}", v.len()))),
    }
}

fn sized<T>(v: Vec<T>, n: usize, what: &str) -> Result<Vec<T>> {
    if v.len() != n {
        return Err(Error::Corrupt(format!("{what} has {} entries, expected {n}", v.len())));
    }
    Ok(v)
}
