//! Binary checkpoint format for bit-exact training resume.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "MLMF" | u32 version | u64 header_len | header bytes | records… | u64 checksum
//! ```
//!
//! The header is UTF-8, newline-separated `key=value` pairs: the full run
//! configuration plus `state.*` counters (iteration, epoch, loss-scale state,
//! optimizer step count, data-iterator cursors). Each tensor record is
//! `u16 name length | name bytes | u8 dtype (0 = f16, 1 = f32) | u8 rank |
//! u64 dims… | payload`. The trailing checksum is FNV-1a 64 over every byte
//! before it.
//!
//! Text where a human with `xxd` can read it, raw little-endian payloads
//! where bit-exactness matters: the design goal is that `load(save(x))`
//! reproduces training continuation byte for byte, while the file stays
//! decodable from any language without this crate.

use std::collections::HashMap;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::{IterState, RowSnapshot};
use crate::error::{Error, Result};
use crate::half::Half;
use crate::hashing::fnv1a64;
use crate::model::{MlstmConfig, ParamSet};

pub const MAGIC: [u8; 4] = *b"MLMF";
pub const VERSION: u32 = 1;

const DTYPE_F16: u8 = 0;
const DTYPE_F32: u8 = 1;

/// Everything the trainer needs to continue a run as if it never stopped.
///
/// Tensor-shaped fields are flat FP32 vectors; `masters`, `adam_m`, and
/// `adam_v` follow the model's canonical tensor order, and the recurrent
/// state is row-major `batch_size × hidden_dim` with rows in worker order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainCheckpoint {
    pub config: RunConfig,
    /// Iterations already completed.
    pub iter: u64,
    /// Epochs already completed.
    pub epoch: u32,
    /// Loss-scale α at the moment of the snapshot.
    pub alpha: f32,
    /// Clean applied updates since the last α change.
    pub clean_steps: u32,
    /// Adam step count t.
    pub adam_t: u64,
    pub masters: Vec<f32>,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
    pub state_h: Vec<f32>,
    pub state_c: Vec<f32>,
    pub iter_state: IterState,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

// ---------------------------------------------------------------------------
// Encoding

fn push_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn push_record(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    push_f32s(out, data);
}

fn rows_to_string(rows: &[RowSnapshot]) -> String {
    rows.iter()
        .map(|r| {
            let shard = match r.shard {
                Some(s) => s.to_string(),
                None => "-".to_string(),
            };
            format!("{shard}:{}:{}", r.cursor, u8::from(r.fresh))
        })
        .collect::<Vec<_>>()
        .join(",")
}

fn rows_from_string(s: &str) -> Result<Vec<RowSnapshot>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|item| {
            let mut parts = item.split(':');
            let (Some(shard), Some(cursor), Some(fresh), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(err(format!("malformed iterator row {item:?}")));
            };
            let shard = match shard {
                "-" => None,
                n => Some(
                    n.parse()
                        .map_err(|_| err(format!("bad shard index {n:?}")))?,
                ),
            };
            let cursor = cursor
                .parse()
                .map_err(|_| err(format!("bad cursor {cursor:?}")))?;
            let fresh = match fresh {
                "0" => false,
                "1" => true,
                other => return Err(err(format!("bad fresh flag {other:?}"))),
            };
            Ok(RowSnapshot { shard, cursor, fresh })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Decoding

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| err("file truncated mid-record"))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_record(r: &mut Reader) -> Result<(String, Vec<usize>, Vec<f32>)> {
    let name_len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| err("tensor name is not UTF-8"))?
        .to_string();
    let dtype = r.u8()?;
    let rank = r.u8()? as usize;
    let mut dims = Vec::with_capacity(rank);
    let mut count = 1usize;
    for _ in 0..rank {
        let d = r.u64()? as usize;
        count = count
            .checked_mul(d)
            .ok_or_else(|| err(format!("tensor {name} dimensions overflow")))?;
        dims.push(d);
    }
    let byte_len = |per: usize| {
        count
            .checked_mul(per)
            .ok_or_else(|| err(format!("tensor {name} payload length overflows")))
    };
    let data = match dtype {
        DTYPE_F32 => {
            let raw = r.take(byte_len(4)?)?;
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
        DTYPE_F16 => {
            let raw = r.take(byte_len(2)?)?;
            raw.chunks_exact(2)
                .map(|c| Half::from_bits(u16::from_le_bytes(c.try_into().unwrap())).to_f32())
                .collect()
        }
        other => return Err(err(format!("tensor {name} has unknown dtype tag {other}"))),
    };
    Ok((name, dims, data))
}

// ---------------------------------------------------------------------------
// Checkpoint proper

impl TrainCheckpoint {
    /// Parameter tensor names and shapes implied by `config`, in canonical
    /// order.
    fn master_layout(config: &RunConfig) -> Vec<(&'static str, Vec<usize>)> {
        let mcfg = MlstmConfig::new(config.embed_dim, config.hidden_dim, config.seq_len);
        ParamSet::<f32>::zeros(&mcfg).tensor_dims().to_vec()
    }

    fn header_string(&self) -> String {
        let mut header = self.config.to_text();
        header.push_str(&format!("state.iter={}\n", self.iter));
        header.push_str(&format!("state.epoch={}\n", self.epoch));
        header.push_str(&format!("state.alpha={}\n", self.alpha));
        header.push_str(&format!("state.clean_steps={}\n", self.clean_steps));
        header.push_str(&format!("state.adam_t={}\n", self.adam_t));
        header.push_str(&format!("state.queue_next={}\n", self.iter_state.queue_next));
        header.push_str(&format!(
            "state.rows={}\n",
            rows_to_string(&self.iter_state.rows)
        ));
        header
    }

    /// Serialize. Validates internal consistency first so a bad snapshot
    /// fails loudly at save time, not at resume time.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.config.validate()?;
        let layout = Self::master_layout(&self.config);
        let expected: usize = layout.iter().map(|(_, d)| d.iter().product::<usize>()).sum();
        for (what, len) in [
            ("masters", self.masters.len()),
            ("adam_m", self.adam_m.len()),
            ("adam_v", self.adam_v.len()),
        ] {
            if len != expected {
                return Err(err(format!(
                    "{what} holds {len} values but the config implies {expected}"
                )));
            }
        }
        let state_len = self.config.batch_size * self.config.hidden_dim;
        if self.state_h.len() != state_len || self.state_c.len() != state_len {
            return Err(err(format!(
                "recurrent state holds {}/{} values but the config implies {state_len}",
                self.state_h.len(),
                self.state_c.len()
            )));
        }

        let header = self.header_string();
        let mut out = Vec::with_capacity(header.len() + expected * 12 + 1024);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());

        let mut off = 0;
        for (name, dims) in &layout {
            let n: usize = dims.iter().product();
            push_record(&mut out, name, dims, &self.masters[off..off + n]);
            off += n;
        }
        push_record(&mut out, "adam_m", &[expected], &self.adam_m);
        push_record(&mut out, "adam_v", &[expected], &self.adam_v);
        let state_dims = [self.config.batch_size, self.config.hidden_dim];
        push_record(&mut out, "state_h", &state_dims, &self.state_h);
        push_record(&mut out, "state_c", &state_dims, &self.state_c);

        let checksum = fnv1a64(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TrainCheckpoint> {
        if bytes.len() < 24 {
            return Err(err("file too short to be a checkpoint"));
        }
        if bytes[..4] != MAGIC {
            return Err(err("bad magic; not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(err(format!(
                "unsupported checkpoint version {version}; this build reads version {VERSION}"
            )));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        let computed = fnv1a64(body);
        if stored != computed {
            return Err(err(format!(
                "checksum mismatch (stored {stored:016x}, computed {computed:016x}); file corrupt"
            )));
        }

        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut r = Reader { bytes: body, pos: 16 };
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| err("header is not UTF-8"))?;

        let mut config = RunConfig::default();
        let mut state: HashMap<&str, &str> = HashMap::new();
        for raw in header.lines() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("header line is not key=value: {line:?}")))?;
            if let Some(skey) = key.strip_prefix("state.") {
                state.insert(skey, value);
            } else {
                config.set(key, value).map_err(|e| err(format!("header: {e}")))?;
            }
        }
        fn field<'h, T: std::str::FromStr>(
            state: &HashMap<&str, &'h str>,
            key: &str,
        ) -> Result<T> {
            let raw = state
                .get(key)
                .ok_or_else(|| err(format!("header is missing state.{key}")))?;
            raw.parse()
                .map_err(|_| err(format!("bad value {raw:?} for state.{key}")))
        }
        let rows_raw = state
            .get("rows")
            .copied()
            .ok_or_else(|| err("header is missing state.rows"))?;
        let iter_state = IterState {
            queue_next: field(&state, "queue_next")?,
            rows: rows_from_string(rows_raw)?,
        };

        let mut tensors: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
        while r.pos < body.len() {
            let (name, dims, data) = read_record(&mut r)?;
            if tensors.insert(name.clone(), (dims, data)).is_some() {
                return Err(err(format!("duplicate tensor record {name:?}")));
            }
        }

        let mut take = |name: &str, dims: &[usize]| -> Result<Vec<f32>> {
            let (got_dims, data) = tensors
                .remove(name)
                .ok_or_else(|| err(format!("missing tensor record {name:?}")))?;
            if got_dims != dims {
                return Err(err(format!(
                    "tensor {name:?} has shape {got_dims:?}, expected {dims:?}"
                )));
            }
            Ok(data)
        };

        let layout = Self::master_layout(&config);
        let expected: usize = layout.iter().map(|(_, d)| d.iter().product::<usize>()).sum();
        let mut masters = Vec::with_capacity(expected);
        for (name, dims) in &layout {
            masters.extend_from_slice(&take(name, dims)?);
        }
        let adam_m = take("adam_m", &[expected])?;
        let adam_v = take("adam_v", &[expected])?;
        let state_dims = [config.batch_size, config.hidden_dim];
        let state_h = take("state_h", &state_dims)?;
        let state_c = take("state_c", &state_dims)?;
        drop(take);
        if let Some(name) = tensors.keys().next() {
            return Err(err(format!("unexpected tensor record {name:?}")));
        }

        Ok(TrainCheckpoint {
            config,
            iter: field(&state, "iter")?,
            epoch: field(&state, "epoch")?,
            alpha: field(&state, "alpha")?,
            clean_steps: field(&state, "clean_steps")?,
            adam_t: field(&state, "adam_t")?,
            masters,
            adam_m,
            adam_v,
            state_h,
            state_c,
            iter_state,
        })
    }

    /// Rebuild the model this checkpoint describes: masters restored
    /// bit-exactly, working weights rebuilt under the recorded precision.
    pub fn model(&self) -> Result<crate::model::Mlstm<f32>> {
        let mcfg = MlstmConfig::new(
            self.config.embed_dim,
            self.config.hidden_dim,
            self.config.seq_len,
        );
        let mut params = ParamSet::<f32>::zeros(&mcfg);
        params.set_from_flat(&self.masters)?;
        crate::model::Mlstm::from_masters(mcfg, self.config.precision, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<TrainCheckpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        TrainCheckpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => err(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
