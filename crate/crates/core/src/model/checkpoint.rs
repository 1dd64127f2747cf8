//! Binary checkpoint format.
//!
//! ```text
//! "CTRLCKPT" | version u32 | config_len u32 | config | step u64 | entries u32
//! entry: name_len u32 | name | dtype u8 | rank u8 | dims u32[rank] | payload
//! alias: name_len u32 | name | 0xFF | target_len u32 | target
//! ```
//!
//! All integers little-endian. The tied output projection is written as an
//! alias of `token_embedding`. Optimizer accumulators, when present, are
//! stored as `optim.adagrad.<param name>`.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use super::{AttnScale, EmbedScale, ModelConfig, ModelError, ModelParams, Result};
use crate::tensor::{DType, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CTRLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const OUTPUT_PROJECTION: &str = "output_projection";

const ALIAS_TAG: u8 = 0xFF;
const OPTIM_PREFIX: &str = "optim.adagrad.";
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    /// Optimizer steps completed.
    pub step: u64,
    /// Adagrad accumulators in parameter order.
    pub accumulators: Option<Vec<Tensor<T>>>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn config_from_bytes(b: &[u8]) -> Result<ModelConfig> {
    if b.len() != 34 {
        return Err(bad(format!("config block of {} bytes, expected 34", b.len())));
    }
    let u = |i: usize| u32::from_le_bytes(b[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let attn_scale = match b[32] {
        0 => AttnScale::PerHead,
        1 => AttnScale::ModelDim,
        t => return Err(bad(format!("unknown attention scale tag {t}"))),
    };
    let embed_scale = match b[33] {
        0 => EmbedScale::None,
        1 => EmbedScale::SqrtD,
        t => return Err(bad(format!("unknown embedding scale tag {t}"))),
    };
    let config = ModelConfig {
        d_model: u(0),
        d_ff: u(1),
        n_layers: u(2),
        n_heads: u(3),
        vocab_size: u(4),
        context: u(5),
        dropout: f64::from_le_bytes(b[24..32].try_into().unwrap()),
        attn_scale,
        embed_scale,
    };
    config.validate()?;
    Ok(config)
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len == 0 || len > MAX_NAME {
            return Err(bad(format!("name length {len} out of range")));
        }
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))
    }
}

fn write_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn write_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    write_name(out, name);
    out.push(T::DTYPE as u8);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

enum Entry<T: Real> {
    Tensor(Tensor<T>),
    Alias(String),
}

fn read_tensor<T: Real>(r: &mut Reader<'_>, dtype: DType) -> Result<Tensor<T>> {
    let rank = r.u8()? as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(bad(format!("rank {rank} out of range")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("tensor size overflows"))?;
    let bytes = numel
        .checked_mul(dtype.size())
        .ok_or_else(|| bad("tensor size overflows"))?;
    let payload = r.take(bytes)?;
    let data: Vec<T> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::read_le(c)))
            .collect(),
    };
    Ok(Tensor::new(shape, data)?)
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.params.num_elements() * std::mem::size_of::<T>() * 2 + 1024);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = self.config.to_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&self.step.to_le_bytes());

        let named = self.params.named();
        let n_acc = self.accumulators.as_ref().map_or(0, |a| a.len());
        out.extend_from_slice(&((named.len() + 1 + n_acc) as u32).to_le_bytes());
        for (name, t) in &named {
            write_tensor(&mut out, name, t);
        }
        write_name(&mut out, OUTPUT_PROJECTION);
        out.push(ALIAS_TAG);
        write_name(&mut out, "token_embedding");
        if let Some(acc) = &self.accumulators {
            for ((name, _), t) in named.iter().zip(acc) {
                write_tensor(&mut out, &format!("{OPTIM_PREFIX}{name}"), t);
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic; not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let config = config_from_bytes(r.take(cfg_len)?)?;
        let step = r.u64()?;
        let count = r.u32()? as usize;

        let mut entries: HashMap<String, Entry<T>> = HashMap::new();
        for _ in 0..count {
            let name = r.name()?;
            let tag = r.u8()?;
            let entry = if tag == ALIAS_TAG {
                Entry::Alias(r.name()?)
            } else {
                let dtype = DType::from_tag(tag).ok_or_else(|| bad(format!("unknown dtype tag {tag}")))?;
                Entry::Tensor(read_tensor(&mut r, dtype)?)
            };
            if entries.insert(name.clone(), entry).is_some() {
                return Err(bad(format!("duplicate entry {name}")));
            }
        }
        if r.pos != buf.len() {
            return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
        }

        match entries.get(OUTPUT_PROJECTION) {
            Some(Entry::Alias(target)) if target == "token_embedding" => {}
            Some(_) => return Err(bad("output_projection must alias token_embedding")),
            None => return Err(bad("missing output_projection alias")),
        }

        // Fill a freshly shaped parameter set by name so the order on disk
        // does not matter.
        let mut params = ModelParams::<T>::init(&config, 0)?;
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        let mut take = |name: &str| -> Result<Option<Tensor<T>>> {
            match entries.remove(name) {
                Some(Entry::Tensor(t)) => Ok(Some(t)),
                Some(Entry::Alias(_)) => Err(bad(format!("{name} may not be an alias"))),
                None => Ok(None),
            }
        };
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = take(name)?.ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(bad(format!(
                    "{name} has shape {:?}, config implies {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        let mut acc = Vec::new();
        for (name, (_, p)) in names.iter().zip(params.named()) {
            if let Some(t) = take(&format!("{OPTIM_PREFIX}{name}"))? {
                if t.shape() != p.shape() {
                    return Err(bad(format!("accumulator for {name} has the wrong shape")));
                }
                acc.push(t);
            }
        }
        let accumulators = match acc.len() {
            0 => None,
            n if n == names.len() => Some(acc),
            n => return Err(bad(format!("{n} of {} optimizer accumulators present", names.len()))),
        };
        entries.remove(OUTPUT_PROJECTION);
        if let Some(extra) = entries.keys().next() {
            return Err(bad(format!("unexpected entry {extra}")));
        }
        Ok(Checkpoint {
            config,
            params,
            step,
            accumulators,
        })
    }

    /// Write atomically: a temporary sibling file is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
