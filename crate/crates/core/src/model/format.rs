//! Model file layout:
//!
//! ```text
//! "DSHA" | u16 LE format version | u32 LE descriptor length |
//! descriptor (UTF-8 JSON: config, ops, shapes, flags, consumer edges) |
//! f32 LE parameter blobs, op by op in descriptor order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{ArchitectureConfig, BlockSpec, Consumer, ModelGraph, OpAttrs, OpKind, OpSpec};

pub const MAGIC: &[u8; 4] = b"DSHA";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct OpDescriptor {
    id: String,
    kind: OpKind,
    shapes: Vec<Vec<usize>>,
    prunable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prune_axis: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tie: Option<String>,
    #[serde(default = "one")]
    prune_heads: usize,
    #[serde(default)]
    consumers: Vec<Consumer>,
    #[serde(default)]
    attrs: OpAttrs,
}

fn one() -> usize {
    1
}

#[derive(Serialize, Deserialize)]
struct BlockDescriptor {
    index: usize,
    ops: Vec<OpDescriptor>,
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    config: ArchitectureConfig,
    blocks: Vec<BlockDescriptor>,
    decoder: Vec<OpDescriptor>,
}

fn describe(op: &OpSpec) -> OpDescriptor {
    OpDescriptor {
        id: op.id.clone(),
        kind: op.kind,
        shapes: op.shapes(),
        prunable: op.prunable,
        prune_axis: op.prunable.then_some(0),
        tie: op.tie.clone(),
        prune_heads: op.prune_heads,
        consumers: op.consumers.clone(),
        attrs: op.attrs.clone(),
    }
}

pub fn model_to_bytes(model: &ModelGraph) -> Result<Vec<u8>> {
    let desc = Descriptor {
        config: model.config.clone(),
        blocks: model
            .blocks
            .iter()
            .map(|b| BlockDescriptor {
                index: b.index,
                ops: b.ops.iter().map(describe).collect(),
            })
            .collect(),
        decoder: model.decoder.iter().map(describe).collect(),
    };
    let text = serde_json::to_vec(&desc)?;
    let desc_len = u32::try_from(text.len()).map_err(|_| Error::Descriptor("descriptor too large".into()))?;
    let mut out = Vec::with_capacity(10 + text.len() + 4 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&desc_len.to_le_bytes());
    out.extend_from_slice(&text);
    for p in model.ops().flat_map(|o| o.params.iter()) {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
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
            Error::Truncated(format!(
                "need {n} bytes for {what} at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let len = u32::from_le_bytes(r.take(4, "descriptor length")?.try_into().unwrap()) as usize;
    let text = r.take(len, "descriptor")?;
    let desc: Descriptor = serde_json::from_slice(text).map_err(|e| Error::Descriptor(e.to_string()))?;

    let mut read_op = |d: OpDescriptor| -> Result<OpSpec> {
        let mut params = Vec::with_capacity(d.shapes.len());
        for shape in d.shapes {
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, &format!("weights of {}", d.id))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(Tensor::new(shape, data).map_err(|e| Error::Descriptor(e.to_string()))?);
        }
        Ok(OpSpec {
            id: d.id,
            kind: d.kind,
            params,
            prunable: d.prunable,
            tie: d.tie,
            prune_heads: d.prune_heads,
            consumers: d.consumers,
            attrs: d.attrs,
        })
    };

    let mut blocks = Vec::with_capacity(desc.blocks.len());
    for b in desc.blocks {
        let ops = b.ops.into_iter().map(&mut read_op).collect::<Result<_>>()?;
        blocks.push(BlockSpec { index: b.index, ops });
    }
    let decoder = desc.decoder.into_iter().map(&mut read_op).collect::<Result<_>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Descriptor(format!(
            "{} trailing bytes after weights",
            bytes.len() - r.pos
        )));
    }
    let model = ModelGraph {
        config: desc.config,
        blocks,
        decoder,
    };
    model.check_consistency()?;
    Ok(model)
}

fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_bytes(model)?).map_err(|e| with_path(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    model_from_bytes(&std::fs::read(path).map_err(|e| with_path(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_toyformer;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = build_toyformer(&ArchitectureConfig::with_seed(11)).unwrap();
        let bytes = model_to_bytes(&m).unwrap();
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(model_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dsha");
        let m = build_toyformer(&ArchitectureConfig::tiny(4)).unwrap();
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }

    #[test]
    fn distinct_load_errors() {
        let m = build_toyformer(&ArchitectureConfig::tiny(4)).unwrap();
        let bytes = model_to_bytes(&m).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = model_from_bytes(&bad).unwrap_err();
        assert!(matches!(err, Error::BadMagic));
        assert!(err.to_string().contains("bad magic"));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            model_from_bytes(&bad),
            Err(Error::VersionMismatch { found: 9, .. })
        ));

        assert!(matches!(
            model_from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(model_from_bytes(&bytes[..8]), Err(Error::Truncated(_))));
        assert!(matches!(model_from_bytes(b"DS"), Err(Error::BadMagic)));
    }
}
