//! Binary checkpoint: a JSON header with the model configuration and label
//! sequence, then every named parameter as raw 32-bit little-endian floats.
//!
//! Layout: `b"IDEACKPT"`, `u32` version, `u32` header length, header bytes,
//! `u32` parameter count, then per parameter `u32` name length, name,
//! `u32` rank, `u32` dims, `f32` values. All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamKind, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{IdeaModel, ModelConfig};
use crate::text::{LabelSequence, LabelSet};

const MAGIC: &[u8; 8] = b"IDEACKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    labels: Vec<String>,
    label_ids: Vec<u32>,
    label_spans: Vec<(usize, usize)>,
}

pub fn to_bytes(model: &IdeaModel) -> Vec<u8> {
    let header = Header {
        config: model.config.clone(),
        labels: model.labels.names().to_vec(),
        label_ids: model.label_sequence.ids.clone(),
        label_spans: model.label_sequence.spans.iter().map(|r| (r.start, r.end)).collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 4 * model.store.num_values());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, header.len() as u32);
    out.extend_from_slice(&header);
    put_u32(&mut out, model.store.len() as u32);
    for (_, p) in model.store.iter() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.rank() as u32);
        for &d in p.value.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<IdeaModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let labels = LabelSet::new(&header.labels)?;
    let seq = LabelSequence {
        ids: header.label_ids,
        spans: header.label_spans.into_iter().map(|(a, b)| a..b).collect(),
    };
    let mut model = IdeaModel::new(header.config, labels, seq, 0)?;

    let count = r.u32()? as usize;
    let mut loaded = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if loaded.id(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        loaded.add(name, Tensor::new(shape, data)?, ParamKind::Weight);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} parameters, model expects {}",
            model.store.len()
        )));
    }
    model.store.load_from(&loaded)?;
    Ok(model)
}

pub fn save(model: &IdeaModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<IdeaModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    from_bytes(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
