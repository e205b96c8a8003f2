//! Versioned binary container shared by tokenizer and model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "GSEGCKPT"
//! version    u32
//! kind       u8       0 = tokenizer, 1 = model
//! V, D, l    u32 ×3   codebook size, codebook width, downsampling factor
//! scales     u32 n, then n × (u32 h, u32 w)
//! metadata   u32 byte length, UTF-8 "key=value" lines
//! tensors    u32 count, then per tensor:
//!              u32 name length, name bytes, u32 rank, rank × u64 dims,
//!              f32 data in row-major order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};
use crate::params::{ParamSet, Tensor};
use crate::tokenizer::{Codebook, Schedule, Tokenizer, TokenizerConfig};

pub const MAGIC: &[u8; 8] = b"GSEGCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Tokenizer,
    Model,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub downsample: usize,
    pub schedule: Schedule,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<Tensor<f32>>,
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

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self.kind {
            CheckpointKind::Tokenizer => 0,
            CheckpointKind::Model => 1,
        });
        put_u32(&mut out, self.codebook_size);
        put_u32(&mut out, self.latent_dim);
        put_u32(&mut out, self.downsample);
        put_u32(&mut out, self.schedule.len());
        for &(h, w) in self.schedule.scales() {
            put_u32(&mut out, h);
            put_u32(&mut out, w);
        }
        let meta: String = self.metadata.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_str(&mut out, &meta);
        put_u32(&mut out, self.tensors.len());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            put_u32(&mut out, t.shape.len());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::SchemaVersion { found: version, expected: VERSION });
        }
        let kind = match r.u8()? {
            0 => CheckpointKind::Tokenizer,
            1 => CheckpointKind::Model,
            k => return Err(Error::Checkpoint(format!("unknown kind {k}"))),
        };
        let codebook_size = r.u32()? as usize;
        let latent_dim = r.u32()? as usize;
        let downsample = r.u32()? as usize;
        let n = r.u32()? as usize;
        let scales = (0..n).map(|_| Ok((r.u32()? as usize, r.u32()? as usize))).collect::<Result<Vec<_>>>()?;
        let schedule = Schedule::new(scales)?;
        let mut metadata = BTreeMap::new();
        for line in r.string()?.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Checkpoint(format!("metadata line {line:?}")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let bytes = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { kind, codebook_size, latent_dim, downsample, schedule, metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        match std::fs::read(path) {
            Ok(buf) => Self::from_bytes(&buf),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::CheckpointNotFound(path.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }

    fn meta<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.metadata.get(key).ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key}")))?;
        v.parse().map_err(|_| Error::Checkpoint(format!("bad value for {key}: {v:?}")))
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        Ok(())
    }
}

pub fn tokenizer_checkpoint(tok: &Tokenizer) -> Checkpoint {
    let c = tok.config();
    let mut metadata = BTreeMap::new();
    let channels: Vec<String> = c.channels.iter().map(|v| v.to_string()).collect();
    metadata.insert("channels".into(), channels.join(","));
    metadata.insert("seed".into(), c.seed.to_string());
    let mut tensors = tok.params().tensors().to_vec();
    tensors.push(Tensor {
        name: "codebook".into(),
        shape: vec![c.codebook_size, c.latent_dim],
        data: tok.codebook().vectors().to_vec(),
    });
    Checkpoint {
        kind: CheckpointKind::Tokenizer,
        codebook_size: c.codebook_size,
        latent_dim: c.latent_dim,
        downsample: c.downsample,
        schedule: c.schedule.clone(),
        metadata,
        tensors,
    }
}

pub fn tokenizer_from_checkpoint(ck: &Checkpoint) -> Result<Tokenizer> {
    ck.expect_kind(CheckpointKind::Tokenizer)?;
    let channels = ck
        .meta::<String>("channels")?
        .split(',')
        .map(|s| s.parse().map_err(|_| Error::Checkpoint(format!("bad channel width {s:?}"))))
        .collect::<Result<Vec<usize>>>()?;
    let config = TokenizerConfig {
        downsample: ck.downsample,
        latent_dim: ck.latent_dim,
        codebook_size: ck.codebook_size,
        channels,
        schedule: ck.schedule.clone(),
        seed: ck.meta("seed")?,
    };
    let mut tensors = ck.tensors.clone();
    let cb = tensors.pop().filter(|t| t.name == "codebook").ok_or_else(|| Error::Checkpoint("missing codebook".into()))?;
    let codebook = Codebook::new(ck.codebook_size, ck.latent_dim, cb.data)?;
    Tokenizer::from_parts(config, ParamSet::from_tensors(tensors), codebook)
}

/// Model checkpoint; the header records the tokenizer it was trained against.
pub fn model_checkpoint(model: &Transformer<f32>, tok: &Tokenizer) -> Checkpoint {
    let c = model.config();
    let mut metadata = BTreeMap::new();
    for (k, v) in [
        ("d_model", c.d_model),
        ("n_layers", c.n_layers),
        ("n_heads", c.n_heads),
        ("ff_dim", c.ff_dim),
        ("max_seq_len", c.max_seq_len),
        ("vocab_size", c.vocab_size),
        ("patch_dim", c.patch_dim),
    ] {
        metadata.insert(k.to_string(), v.to_string());
    }
    metadata.insert("seed".into(), c.seed.to_string());
    let tc = tok.config();
    Checkpoint {
        kind: CheckpointKind::Model,
        codebook_size: tc.codebook_size,
        latent_dim: tc.latent_dim,
        downsample: tc.downsample,
        schedule: c.schedule.clone(),
        metadata,
        tensors: model.params().tensors().to_vec(),
    }
}

pub fn model_from_checkpoint(ck: &Checkpoint, tok: &Tokenizer) -> Result<Transformer<f32>> {
    ck.expect_kind(CheckpointKind::Model)?;
    let tc = tok.config();
    if (ck.codebook_size, ck.latent_dim, ck.downsample) != (tc.codebook_size, tc.latent_dim, tc.downsample)
        || ck.schedule != tc.schedule
    {
        return Err(Error::Checkpoint("model was trained against a different tokenizer".into()));
    }
    let config = ModelConfig {
        d_model: ck.meta("d_model")?,
        n_layers: ck.meta("n_layers")?,
        n_heads: ck.meta("n_heads")?,
        ff_dim: ck.meta("ff_dim")?,
        max_seq_len: ck.meta("max_seq_len")?,
        vocab_size: ck.meta("vocab_size")?,
        schedule: ck.schedule.clone(),
        latent_dim: ck.latent_dim,
        patch_dim: ck.meta("patch_dim")?,
        seed: ck.meta("seed")?,
    };
    Transformer::from_params(config, ParamSet::from_tensors(ck.tensors.clone()))
}
