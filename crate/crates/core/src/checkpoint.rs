//! Binary checkpoints: magic, version, configuration, cursors, then tagged
//! tensors with little-endian f32 payloads.

use std::io::Write;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{NamedParameterSet, NamedTensor};
use crate::nn::{LayerTag, TagKind};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FSCTCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub params: NamedParameterSet<f32>,
    /// Rounds of client RNG streams consumed so far.
    pub rng_cursor: u64,
    pub round_index: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&self.round_index.to_le_bytes());
        out.extend_from_slice(&self.rng_cursor.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for e in self.params.entries() {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.tag.kind.code());
            out.extend_from_slice(&e.tag.layer_index.to_le_bytes());
            out.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::format(path, "magic", "not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(
                path,
                "version",
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let cfg_len = r.len("config length")?;
        let config: ExperimentConfig = serde_json::from_slice(r.take(cfg_len, "config")?)
            .map_err(|e| Error::format(path, "config", e.to_string()))?;
        let round_index = r.u64("round_index")?;
        let rng_cursor = r.u64("rng_cursor")?;
        let count = r.len("tensor count")?;
        let mut entries = Vec::new();
        for i in 0..count {
            let field = |f: &str| format!("tensor[{i}].{f}");
            let name_len = r.u32(&field("name length"))? as usize;
            let name = std::str::from_utf8(r.take(name_len, &field("name"))?)
                .map_err(|_| Error::format(path, field("name"), "not UTF-8"))?
                .to_string();
            let code = r.take(1, &field("tag"))?[0];
            let kind = TagKind::from_code(code)
                .ok_or_else(|| Error::format(path, field("tag"), format!("unknown tag code {code}")))?;
            let layer = r.u32(&field("layer index"))?;
            let rank = r.u32(&field("rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len(&field("extent"))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format(path, field("extent"), "element count overflows"))?;
            let payload = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::format(path, field("payload"), "size overflows"))?,
                &field("payload"),
            )?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push(NamedTensor {
                name,
                tag: LayerTag::new(kind, layer),
                value: Tensor::from_vec(&shape, data)?,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                path,
                "trailer",
                format!("{} unexpected bytes after the last tensor", bytes.len() - r.pos),
            ));
        }
        let params = NamedParameterSet::new(entries).map_err(|e| Error::format(path, "tensors", e.to_string()))?;
        Ok(Checkpoint {
            config,
            params,
            rng_cursor,
            round_index,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.path, field, format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, field: &str) -> Result<usize> {
        let v = self.u64(field)?;
        usize::try_from(v).map_err(|_| Error::format(self.path, field, format!("{v} does not fit in memory")))
    }
}

/// Write `ckpt` to `path` via a temporary sibling, so readers never see a
/// partial file.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
