//! Binary checkpoints.
//!
//! Layout (little-endian): magic `VGTK`, `u32` version, `u32` record count,
//! then records of `u32` name length, name bytes, `u8` kind and payload,
//! and finally the SHA-256 of everything before it. Payloads: text is a
//! `u64` length plus UTF-8 bytes; a tensor is a `u32` rank, `u64` dims and
//! `f64` values; a counter list is a `u64` length plus `u64` values.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use vgt_core::config::RunConfig;
use vgt_core::tensor::{AdamConfig, OptimizerState, ParamStore, Tensor};
use vgt_core::text::Vocab;

use crate::error::{io_err, HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"VGTK";
pub const VERSION: u32 = 1;

const KIND_TEXT: u8 = 0;
const KIND_TENSOR: u8 = 1;
const KIND_U64S: u8 = 2;

/// Training progress stored alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub seed: u64,
    /// Epochs completed in the current stage.
    pub epoch: u64,
    pub best_metric: f64,
    pub best_epoch: u64,
    pub stage: u64,
}

impl Default for TrainState {
    fn default() -> Self {
        Self {
            seed: 0,
            epoch: 0,
            best_metric: f64::NEG_INFINITY,
            best_epoch: 0,
            stage: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    pub state: TrainState,
}

fn put_name(buf: &mut Vec<u8>, name: &str, kind: u8) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(kind);
}

fn put_text(buf: &mut Vec<u8>, name: &str, text: &str) {
    put_name(buf, name, KIND_TEXT);
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_name(buf, name, KIND_TENSOR);
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_u64s(buf: &mut Vec<u8>, name: &str, values: &[u64]) {
    put_name(buf, name, KIND_U64S);
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = toml::to_string(&self.config).map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
        let mut body = Vec::new();
        let mut count = 0u32;
        put_text(&mut body, "config", &config);
        put_text(&mut body, "vocab", &self.vocab.to_text());
        count += 2;
        for (name, t) in self.params.iter() {
            put_tensor(&mut body, &format!("param/{name}"), t);
            count += 1;
        }
        let frozen: Vec<&str> = self.params.frozen_names();
        put_text(&mut body, "frozen", &frozen.join("\n"));
        count += 1;
        if let Some(opt) = &self.optimizer {
            let c = &opt.config;
            put_u64s(
                &mut body,
                "adam/state",
                &[
                    opt.step,
                    c.total_steps,
                    c.beta1.to_bits(),
                    c.beta2.to_bits(),
                    c.eps.to_bits(),
                    c.base_lr.to_bits(),
                ],
            );
            count += 1;
            for ((name, _), (m, v)) in self.params.iter().zip(opt.m.iter().zip(&opt.v)) {
                put_tensor(&mut body, &format!("adam.m/{name}"), m);
                put_tensor(&mut body, &format!("adam.v/{name}"), v);
                count += 2;
            }
        }
        let s = &self.state;
        put_u64s(
            &mut body,
            "train/state",
            &[s.seed, s.epoch, s.best_metric.to_bits(), s.best_epoch, s.stage],
        );
        count += 1;

        let mut out = Vec::with_capacity(body.len() + 44);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&body);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| HarnessError::Checkpoint(m.to_string());
        if bytes.len() < 12 + 32 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (content, digest) = bytes.split_at(bytes.len() - 32);
        let version = u32::from_le_bytes(content[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(HarnessError::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        if Sha256::digest(content).as_slice() != digest {
            return Err(bad("checksum mismatch (truncated or corrupted file)"));
        }
        let count = u32::from_le_bytes(content[8..12].try_into().expect("4 bytes"));
        let mut r = Reader { buf: content, pos: 12 };

        let mut config = None;
        let mut vocab = None;
        let mut params = ParamStore::new();
        let mut frozen = String::new();
        let mut adam_state = None;
        let mut moments: Vec<(String, Tensor, bool)> = Vec::new();
        let mut state = None;
        for _ in 0..count {
            let (name, record) = r.record()?;
            match (name.as_str(), record) {
                ("config", Record::Text(t)) => {
                    config = Some(toml::from_str::<RunConfig>(&t).map_err(|e| HarnessError::Checkpoint(e.to_string()))?)
                }
                ("vocab", Record::Text(t)) => vocab = Some(Vocab::from_text(&t)?),
                ("frozen", Record::Text(t)) => frozen = t,
                ("adam/state", Record::U64s(v)) => adam_state = Some(v),
                ("train/state", Record::U64s(v)) => state = Some(v),
                (n, Record::Tensor(t)) => {
                    if let Some(p) = n.strip_prefix("param/") {
                        params.insert(p, t)?;
                    } else if let Some(p) = n.strip_prefix("adam.m/") {
                        moments.push((p.to_string(), t, true));
                    } else if let Some(p) = n.strip_prefix("adam.v/") {
                        moments.push((p.to_string(), t, false));
                    } else {
                        return Err(HarnessError::Checkpoint(format!("unknown record `{n}`")));
                    }
                }
                (n, _) => return Err(HarnessError::Checkpoint(format!("unexpected record `{n}`"))),
            }
        }
        if r.pos != content.len() {
            return Err(bad("trailing bytes after the last record"));
        }
        for name in frozen.lines().filter(|l| !l.is_empty()) {
            params.freeze(name)?;
        }
        let optimizer = match adam_state {
            None => None,
            Some(v) if v.len() == 6 => {
                let config = AdamConfig {
                    beta1: f64::from_bits(v[2]),
                    beta2: f64::from_bits(v[3]),
                    eps: f64::from_bits(v[4]),
                    base_lr: f64::from_bits(v[5]),
                    total_steps: v[1],
                };
                let mut opt = OptimizerState::new(&params, config)?;
                opt.step = v[0];
                let mut seen = vec![[false; 2]; params.len()];
                for (name, t, is_m) in moments {
                    let id = params.id(&name)?;
                    if t.shape() != params.tensor(id).shape() {
                        return Err(HarnessError::Checkpoint(format!("moment shape mismatch for `{name}`")));
                    }
                    let slot = if is_m { &mut opt.m[id] } else { &mut opt.v[id] };
                    *slot = t;
                    seen[id][usize::from(!is_m)] = true;
                }
                if seen.iter().any(|s| !s[0] || !s[1]) {
                    return Err(bad("optimizer moments incomplete"));
                }
                Some(opt)
            }
            Some(_) => return Err(bad("malformed optimizer record")),
        };
        let state = match state {
            Some(v) if v.len() == 5 => TrainState {
                seed: v[0],
                epoch: v[1],
                best_metric: f64::from_bits(v[2]),
                best_epoch: v[3],
                stage: v[4],
            },
            _ => return Err(bad("missing or malformed training state")),
        };
        Ok(Self {
            config: config.ok_or_else(|| bad("missing config"))?,
            vocab: vocab.ok_or_else(|| bad("missing vocabulary"))?,
            params,
            optimizer,
            state,
        })
    }

    /// Writes atomically via a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

enum Record {
    Text(String),
    Tensor(Tensor),
    U64s(Vec<u64>),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(HarnessError::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| HarnessError::Checkpoint("length overflow".into()))
    }

    fn record(&mut self) -> Result<(String, Record)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| HarnessError::Checkpoint("record name is not UTF-8".into()))?;
        let kind = self.take(1)?[0];
        let rec = match kind {
            KIND_TEXT => {
                let n = self.len()?;
                let text = String::from_utf8(self.take(n)?.to_vec())
                    .map_err(|_| HarnessError::Checkpoint(format!("record `{name}` is not UTF-8")))?;
                Record::Text(text)
            }
            KIND_TENSOR => {
                let rank = self.u32()? as usize;
                let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
                let numel = shape
                    .iter()
                    .try_fold(1usize, |a, &d| a.checked_mul(d))
                    .ok_or_else(|| HarnessError::Checkpoint("tensor size overflow".into()))?;
                let raw = self.take(numel.saturating_mul(8))?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Record::Tensor(Tensor::new(shape, data)?)
            }
            KIND_U64S => {
                let n = self.len()?;
                let v = (0..n).map(|_| self.u64()).collect::<Result<Vec<_>>>()?;
                Record::U64s(v)
            }
            other => return Err(HarnessError::Checkpoint(format!("unknown record kind {other}"))),
        };
        Ok((name, rec))
    }
}
