//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        8 bytes  "GPNERCK\0"
//! version      u32
//! config       u64 length + UTF-8 JSON (model configuration)
//! meta         u64 length + UTF-8 (free text, the resolved run configuration)
//! vocab        u64 length + UTF-8 JSON array of tokens after PAD and UNK
//! types        u64 length + UTF-8 JSON array of entity type names
//! tensors      u32 count, then per tensor:
//!                u32 name length + UTF-8 name
//!                u64 rows, u64 cols
//!                rows·cols f64 values, row-major
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::heads::EntityTypeSet;
use crate::model::{Model, ModelConfig};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 8] = b"GPNERCK\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: String,
}

fn put_blob(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn json<T: serde::Serialize>(value: &T) -> Result<Vec<u8>> {
    serde_json::to_vec(value).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn to_bytes(model: &Model, meta: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_blob(&mut out, &json(&model.config)?);
    put_blob(&mut out, meta.as_bytes());
    put_blob(&mut out, &json(&model.vocab.user_tokens())?);
    put_blob(&mut out, &json(&model.types)?);
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u64).to_le_bytes());
        for x in p.value.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} too large")))
    }

    fn str(&mut self, n: usize, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }

    fn blob(&mut self, what: &str) -> Result<&'a str> {
        let n = self.len(what)?;
        self.str(n, what)
    }
}

fn parse_json<'a, T: serde::Deserialize<'a>>(text: &'a str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("bad {what}: {e}")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config: ModelConfig = parse_json(r.blob("config")?, "config")?;
    let meta = r.blob("meta")?.to_string();
    let tokens: Vec<String> = parse_json(r.blob("vocab")?, "vocab")?;
    let types: EntityTypeSet = parse_json(r.blob("types")?, "types")?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32("tensor name length")? as usize;
        let name = r.str(n, "tensor name")?.to_string();
        let rows = r.len("rows")?;
        let cols = r.len("cols")?;
        let size = rows
            .checked_mul(cols)
            .and_then(|s| s.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
        let raw = r.take(size, &format!("tensor `{name}`"))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if tensors.insert(name.clone(), Matrix::from_vec(rows, cols, values)?).is_some() {
            return Err(Error::Checkpoint(format!("tensor `{name}` appears twice")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut model = Model::zeroed(config, Vocab::from_tokens(tokens), types)?;
    for p in model.params_mut() {
        let t = tensors
            .remove(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has shape {:?}, the configuration implies {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok(Checkpoint { model, meta })
}

pub fn save(path: impl AsRef<Path>, model: &Model, meta: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::HeadKind;

    fn model(kind: HeadKind) -> Model {
        let cfg = ModelConfig { head: kind, v: 6, d: 4, max_span_len: Some(3), ..ModelConfig::default() };
        let vocab = Vocab::build([["a", "b", "c"].as_slice()]);
        Model::new(cfg, vocab, EntityTypeSet::new(["X", "Y"]).unwrap(), 4).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        for kind in HeadKind::ALL {
            let m = model(kind);
            let bytes = to_bytes(&m, "seed = 4").unwrap();
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(back.model, m);
            assert_eq!(back.meta, "seed = 4");
            assert_eq!(to_bytes(&back.model, "seed = 4").unwrap(), bytes);
        }
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = to_bytes(&model(HeadKind::Gp), "").unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(from_bytes(&wrong_version).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut trailing = bytes;
        trailing.push(0);
        assert!(from_bytes(&trailing).is_err());
    }
}
