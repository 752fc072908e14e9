//! Training checkpoints (`CBDK`).
//!
//! ```text
//! "CBDK" | version u32 | crc32 u32 (over everything that follows) | sections...
//! section  = name str | entry count u32 | manifest entries | payloads
//! entry    = name str | dtype u8 | ndim u32 | dims u64 * ndim | byte length u64
//! str      = length u32 | utf-8 bytes
//! ```
//!
//! Sections appear in order: `config` (JSON snapshot), `params`, `ema`,
//! `optimizer`, `rng`. Payloads are raw little-endian values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{checksum, read_file, write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::predictor::{Gradients, PredictorConfig, PredictorParams};
use crate::quantizer::QuantizerSpec;
use crate::rng::{RngState, SeededRng};
use crate::trainer::{OptimizerState, TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"CBDK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
enum DType {
    U8 = 0,
    F64 = 1,
    U64 = 2,
}

impl DType {
    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::U8),
            1 => Some(DType::F64),
            2 => Some(DType::U64),
            _ => None,
        }
    }
}

struct Entry {
    name: String,
    dtype: DType,
    dims: Vec<usize>,
    payload: Vec<u8>,
}

impl Entry {
    fn f64s(name: String, dims: Vec<usize>, data: &[f64]) -> Self {
        Entry {
            name,
            dtype: DType::F64,
            dims,
            payload: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    fn u64s(name: &str, data: &[u64]) -> Self {
        Entry {
            name: name.into(),
            dtype: DType::U64,
            dims: vec![data.len()],
            payload: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    fn bytes(name: &str, data: &[u8]) -> Self {
        Entry {
            name: name.into(),
            dtype: DType::U8,
            dims: vec![data.len()],
            payload: data.to_vec(),
        }
    }
}

struct Section {
    name: &'static str,
    entries: Vec<Entry>,
}

fn write_section(w: &mut ByteWriter, s: &Section) {
    w.str(s.name);
    w.u32(s.entries.len() as u32);
    for e in &s.entries {
        w.str(&e.name);
        w.u8(e.dtype as u8);
        w.u32(e.dims.len() as u32);
        for &d in &e.dims {
            w.u64(d as u64);
        }
        w.u64(e.payload.len() as u64);
    }
    for e in &s.entries {
        w.bytes(&e.payload);
    }
}

fn read_section(r: &mut ByteReader<'_>, expected: &str) -> Result<Vec<Entry>> {
    let name = r.str()?;
    if name != expected {
        return Err(r.corrupt(format!("expected section {expected:?}, found {name:?}")));
    }
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.str()?;
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| r.corrupt(format!("unknown dtype tag {tag}")))?;
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = r.u64()? as usize;
        let elem = match dtype {
            DType::U8 => 1,
            DType::F64 | DType::U64 => 8,
        };
        let expected_len = dims.iter().try_fold(elem, |acc: usize, &d| acc.checked_mul(d));
        if expected_len != Some(len) {
            return Err(r.corrupt(format!("entry {name} length does not match its shape")));
        }
        manifest.push((name, dtype, dims, len));
    }
    manifest
        .into_iter()
        .map(|(name, dtype, dims, len)| {
            Ok(Entry {
                payload: r.take(len)?.to_vec(),
                name,
                dtype,
                dims,
            })
        })
        .collect()
}

fn as_f64s(e: &Entry, r: &ByteReader<'_>) -> Result<Vec<f64>> {
    if e.dtype != DType::F64 {
        return Err(r.corrupt(format!("entry {} is not f64", e.name)));
    }
    Ok(e.payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn as_u64s(e: &Entry, r: &ByteReader<'_>) -> Result<Vec<u64>> {
    if e.dtype != DType::U64 {
        return Err(r.corrupt(format!("entry {} is not u64", e.name)));
    }
    Ok(e.payload
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigSnapshot {
    train: TrainConfig,
    predictor: PredictorConfig,
    quantizer: QuantizerSpec,
}

/// Complete, resumable training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub spec: QuantizerSpec,
    pub state: TrainState,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.train == other.train
            && self.spec == other.spec
            && self.state.params == other.state.params
            && self.state.ema == other.state.ema
            && self.state.opt == other.state.opt
            && self.state.rng.state() == other.state.rng.state()
    }
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.state.opt.step
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let snapshot = ConfigSnapshot {
            train: self.train.clone(),
            predictor: self.state.params.config().clone(),
            quantizer: self.spec.clone(),
        };
        let json = serde_json::to_vec(&snapshot)?;
        let param_entries = |p: &PredictorParams| {
            p.params()
                .iter()
                .map(|t| Entry::f64s(t.name.clone(), t.shape.clone(), &t.data))
                .collect()
        };
        let params = &self.state.params;
        let mut opt_entries = vec![Entry::u64s("step", &[self.state.opt.step])];
        for (prefix, g) in [("m", &self.state.opt.m), ("v", &self.state.opt.v)] {
            for (t, buf) in params.params().iter().zip(&g.0) {
                opt_entries.push(Entry::f64s(format!("{prefix}.{}", t.name), t.shape.clone(), buf));
            }
        }
        let rng = self.state.rng.state();
        let sections = [
            Section {
                name: "config",
                entries: vec![Entry::bytes("json", &json)],
            },
            Section {
                name: "params",
                entries: param_entries(params),
            },
            Section {
                name: "ema",
                entries: param_entries(&self.state.ema),
            },
            Section {
                name: "optimizer",
                entries: opt_entries,
            },
            Section {
                name: "rng",
                entries: vec![
                    Entry::bytes("seed", &rng.seed),
                    Entry::u64s("stream", &[rng.stream]),
                    Entry::u64s("word_pos", &[rng.word_pos as u64, (rng.word_pos >> 64) as u64]),
                ],
            },
        ];
        let mut body = ByteWriter::default();
        for s in &sections {
            write_section(&mut body, s);
        }
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(checksum(&body.buf));
        w.bytes(&body.buf);
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::integrity(path, "bad magic or truncated header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let stored = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let body = &bytes[12..];
        if checksum(body) != stored {
            return Err(Error::integrity(path, "checksum mismatch"));
        }
        let mut r = ByteReader::new(body, path);

        let config = read_section(&mut r, "config")?;
        let json = config
            .first()
            .filter(|e| e.name == "json" && e.dtype == DType::U8)
            .ok_or_else(|| r.corrupt("missing config snapshot"))?;
        let snap: ConfigSnapshot =
            serde_json::from_slice(&json.payload).map_err(|e| r.corrupt(format!("config: {e}")))?;
        let spec = QuantizerSpec::new(snap.quantizer.levels(), snap.quantizer.stats().clone())?;

        let read_params = |r: &mut ByteReader<'_>, section: &str| -> Result<PredictorParams> {
            let entries = read_section(r, section)?;
            let tensors = entries
                .iter()
                .map(|e| Ok((e.name.clone(), e.dims.clone(), as_f64s(e, r)?)))
                .collect::<Result<Vec<_>>>()?;
            PredictorParams::from_tensors(snap.predictor.clone(), tensors)
                .map_err(|e| r.corrupt(format!("{section}: {e}")))
        };
        let params = read_params(&mut r, "params")?;
        let ema = read_params(&mut r, "ema")?;

        let opt = read_section(&mut r, "optimizer")?;
        let n = params.params().len();
        if opt.len() != 1 + 2 * n || opt[0].name != "step" {
            return Err(r.corrupt("optimizer section layout"));
        }
        let step = *as_u64s(&opt[0], &r)?
            .first()
            .ok_or_else(|| r.corrupt("optimizer step"))?;
        let mut moments = [params.zeros_like(), params.zeros_like()];
        for (k, moment) in moments.iter_mut().enumerate() {
            for (j, (t, buf)) in params.params().iter().zip(moment.0.iter_mut()).enumerate() {
                let e = &opt[1 + k * n + j];
                let prefix = if k == 0 { "m" } else { "v" };
                if e.name != format!("{prefix}.{}", t.name) || e.dims != t.shape {
                    return Err(r.corrupt(format!("optimizer entry {}", e.name)));
                }
                *buf = as_f64s(e, &r)?;
            }
        }
        let [m, v] = moments;

        let rng = read_section(&mut r, "rng")?;
        if rng.len() != 3 || rng[0].payload.len() != 32 {
            return Err(r.corrupt("rng section layout"));
        }
        let stream = as_u64s(&rng[1], &r)?;
        let word = as_u64s(&rng[2], &r)?;
        if stream.len() != 1 || word.len() != 2 {
            return Err(r.corrupt("rng section layout"));
        }
        let rng_state = RngState {
            seed: rng[0].payload.clone().try_into().unwrap(),
            stream: stream[0],
            word_pos: word[0] as u128 | ((word[1] as u128) << 64),
        };
        if r.remaining() != 0 {
            return Err(r.corrupt("trailing bytes"));
        }
        snap.train.validate()?;
        Ok(Checkpoint {
            train: snap.train,
            spec,
            state: TrainState {
                params,
                ema,
                opt: OptimizerState {
                    m: Gradients(m.0),
                    v: Gradients(v.0),
                    step,
                },
                rng: SeededRng::from_state(rng_state),
            },
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path)?, path)
}
