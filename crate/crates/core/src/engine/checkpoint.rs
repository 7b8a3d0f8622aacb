//! Fixed-layout little-endian checkpoint container.
//!
//! Layout: magic `PIPACKPT`, `u32` version, `u32` record count, then per
//! record `u32` name length, UTF-8 name, `u8` dtype, `u32` rank, `u64`
//! extents and the payload. All sampling randomness is derived from
//! `(seed, iter)`, so those two records are the complete rng state.

use std::fs;
use std::path::Path;

use super::config::TrainConfig;
use super::optim::OptimState;
use super::train::TrainState;
use crate::bank::FeatureBank;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{ParamSet, SegNet, TeacherState, HEAD_PREFIX};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PIPACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_RANK: u32 = 8;
const MAX_NAME: u32 = 4096;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl Payload {
    fn dtype(&self) -> u8 {
        match self {
            Payload::F64(_) => 0,
            Payload::U64(_) => 1,
            Payload::U8(_) => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Record {
    pub fn tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Record {
            name: name.into(),
            shape: t.shape().to_vec(),
            payload: Payload::F64(t.data().to_vec()),
        }
    }

    pub fn u64s(name: impl Into<String>, v: Vec<u64>) -> Self {
        Record {
            name: name.into(),
            shape: vec![v.len()],
            payload: Payload::U64(v),
        }
    }

    pub fn bytes(name: impl Into<String>, v: Vec<u8>) -> Self {
        Record {
            name: name.into(),
            shape: vec![v.len()],
            payload: Payload::U8(v),
        }
    }
}

pub fn encode_records(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.payload.dtype());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &e in &r.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match &r.payload {
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_records(buf: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let nlen = r.u32()?;
        if nlen > MAX_NAME {
            return Err(Error::Checkpoint(format!("record name length {nlen}")));
        }
        let name = String::from_utf8(r.take(nlen as usize)?.to_vec())
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let dtype = r.take(1)?[0];
        let rank = r.u32()?;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let e = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint(format!("{name}: extent overflow")))?;
            numel = numel
                .checked_mul(e)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: extent overflow")))?;
            shape.push(e);
        }
        let width = match dtype {
            0 | 1 => 8,
            2 => 1,
            d => return Err(Error::Checkpoint(format!("{name}: unknown dtype {d}"))),
        };
        let bytes = r.take(
            numel
                .checked_mul(width)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: extent overflow")))?,
        )?;
        let payload = match dtype {
            0 => Payload::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            1 => Payload::U64(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => Payload::U8(bytes.to_vec()),
        };
        out.push(Record { name, shape, payload });
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_records(records)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(&buf)
}

/// Serializes the full training state.
pub fn state_records(state: &TrainState) -> Vec<Record> {
    let mut out = vec![
        Record::bytes("meta.config", state.cfg.to_text().into_bytes()),
        Record::u64s("meta.iter", vec![state.iter]),
        Record::u64s("meta.seed", vec![state.cfg.seed]),
    ];
    for (n, t) in state.student.params.iter() {
        out.push(Record::tensor(format!("student.{n}"), t));
    }
    for (n, t) in state.teacher.params.iter() {
        out.push(Record::tensor(format!("teacher.{n}"), t));
    }
    out.push(Record::tensor("teacher.momentum", &Tensor::scalar(state.teacher.momentum)));
    for ((n, _), (m, v)) in state.student.params.iter().zip(state.optim.m.iter().zip(&state.optim.v)) {
        out.push(Record::tensor(format!("optim.m.{n}"), m));
        out.push(Record::tensor(format!("optim.v.{n}"), v));
    }
    out.push(Record::u64s("optim.step", vec![state.optim.step]));
    let dim = state.bank.dim();
    for c in 0..state.bank.num_classes() {
        let rows: Vec<f64> = state.bank.queue(c).flatten().copied().collect();
        out.push(Record {
            name: format!("bank.{c}"),
            shape: vec![rows.len() / dim, dim],
            payload: Payload::F64(rows),
        });
    }
    out.push(Record::u64s("bank.counters", vec![state.bank.pushed, state.bank.evicted]));
    out
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    write_records(path, &state_records(state))
}

struct Lookup<'a>(&'a [Record]);

impl<'a> Lookup<'a> {
    fn get(&self, name: &str) -> Result<&'a Record> {
        self.0
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))
    }

    fn f64s(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let r = self.get(name)?;
        match &r.payload {
            Payload::F64(v) if r.shape == shape => Tensor::new(shape, v.clone()),
            Payload::F64(_) => Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {shape:?}", r.shape))),
            _ => Err(Error::Checkpoint(format!("{name}: expected f64 data"))),
        }
    }

    fn u64s(&self, name: &str, n: usize) -> Result<&'a [u64]> {
        match &self.get(name)?.payload {
            Payload::U64(v) if v.len() == n => Ok(v),
            _ => Err(Error::Checkpoint(format!("{name}: expected {n} u64 values"))),
        }
    }

    fn params(&self, prefix: &str, like: &ParamSet) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (n, t) in like.iter() {
            out.insert(n, self.f64s(&format!("{prefix}{n}"), t.shape())?);
        }
        Ok(out)
    }
}

fn stored_config(records: &[Record]) -> Result<TrainConfig> {
    match &Lookup(records).get("meta.config")?.payload {
        Payload::U8(b) => {
            let text = std::str::from_utf8(b).map_err(|_| Error::Checkpoint("meta.config is not UTF-8".into()))?;
            TrainConfig::from_text(text)
        }
        _ => Err(Error::Checkpoint("meta.config: expected bytes".into())),
    }
}

/// Restores a training state for `cfg`. The stored architecture must match
/// `cfg` exactly; other knobs come from `cfg`, so a run may resume under
/// changed logging or loss settings.
pub fn load_checkpoint(path: &Path, cfg: &TrainConfig) -> Result<TrainState> {
    let records = read_records(path)?;
    state_from_records(&records, cfg)
}

pub fn state_from_records(records: &[Record], cfg: &TrainConfig) -> Result<TrainState> {
    let stored = stored_config(records)?;
    if stored.model() != cfg.model() {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: checkpoint {:?}, requested {:?}",
            stored.model(),
            cfg.model()
        )));
    }
    if stored.bank_capacity != cfg.bank_capacity {
        return Err(Error::Checkpoint("bank capacity mismatch".into()));
    }
    let mut state = TrainState::new(cfg.clone())?;
    let look = Lookup(records);
    let like = state.student.params.clone();
    state.student = SegNet {
        cfg: cfg.model(),
        params: look.params("student.", &like)?,
    };
    state.teacher = TeacherState {
        params: look.params("teacher.", &like)?,
        momentum: look.f64s("teacher.momentum", &[1])?.item(),
    };
    let mut optim = OptimState::new(&like);
    for (i, (n, t)) in like.iter().enumerate() {
        optim.m[i] = look.f64s(&format!("optim.m.{n}"), t.shape())?;
        optim.v[i] = look.f64s(&format!("optim.v.{n}"), t.shape())?;
    }
    optim.step = look.u64s("optim.step", 1)?[0];
    state.optim = optim;
    let mut bank = FeatureBank::new(cfg.num_classes, cfg.embed_dim, cfg.bank_capacity)?;
    for c in 0..cfg.num_classes {
        let r = look.get(&format!("bank.{c}"))?;
        match &r.payload {
            Payload::F64(v) if r.shape.len() == 2 && r.shape[1] == cfg.embed_dim => bank.restore_queue(c, v)?,
            _ => return Err(Error::Checkpoint(format!("bank.{c}: bad record"))),
        }
    }
    let counters = look.u64s("bank.counters", 2)?;
    bank.pushed = counters[0];
    bank.evicted = counters[1];
    state.bank = bank;
    state.iter = look.u64s("meta.iter", 1)?[0];
    if look.u64s("meta.seed", 1)?[0] != cfg.seed {
        return Err(Error::Checkpoint("seed differs from the stored run".into()));
    }
    Ok(state)
}

/// Stored config together with the segmentation parameters needed for
/// inference. Projection-head records are neither needed nor read.
pub fn load_inference_params(path: &Path, teacher: bool) -> Result<(TrainConfig, ParamSet)> {
    let records = read_records(path)?;
    let cfg = stored_config(&records)?;
    let prefix = if teacher { "teacher." } else { "student." };
    let mut like = SegNet::new(cfg.model(), &mut rand::rngs::mock::StepRng::new(0, 0)).params;
    like.remove_prefix(HEAD_PREFIX);
    let params = Lookup(&records).params(prefix, &like)?;
    Ok((cfg, params))
}

/// Whether a record holds projection-head weights of either network.
pub fn is_head_record(name: &str) -> bool {
    ["student.", "teacher.", "optim.m.", "optim.v."]
        .iter()
        .any(|p| name.strip_prefix(p).is_some_and(|rest| rest.starts_with(HEAD_PREFIX)))
}
