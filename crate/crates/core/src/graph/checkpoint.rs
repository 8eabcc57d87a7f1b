//! Binary checkpoint: magic, format version, a JSON header describing the
//! tree and every parameter, then little-endian parameter values in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Cign;
use super::tree::TreeSpec;
use crate::error::{CignError, Result};
use crate::scalar::Scalar;
use crate::substrate::{ParamTag, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CIGNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Longest header accepted when reading.
const MAX_HEADER: u64 = 64 << 20;

#[derive(Serialize, Deserialize)]
struct TopologyHeader {
    branching: Vec<usize>,
    nodes: usize,
    leaves: usize,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    tag: ParamTag,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    precision: String,
    topology: TopologyHeader,
    tree: TreeSpec,
    params: Vec<ParamEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

fn ck(msg: impl Into<String>) -> CignError {
    CignError::Checkpoint(msg.into())
}

/// Writes `model` with free-form `meta` (iteration, seed, ...).
pub fn write_checkpoint<T: Scalar, W: Write>(model: &Cign<T>, meta: serde_json::Value, mut w: W) -> Result<()> {
    let topo = model.topology();
    let header = Header {
        precision: T::NAME.to_string(),
        topology: TopologyHeader {
            branching: model.spec().branching.clone(),
            nodes: topo.len(),
            leaves: topo.leaves().count(),
        },
        tree: model.spec().clone(),
        params: model
            .params()
            .iter()
            .map(|(_, p)| ParamEntry { name: p.name.clone(), tag: p.tag, shape: p.value.shape().to_vec() })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| ck(format!("write failed: {e}"));
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let wide = T::NAME == "f64";
    for (_, p) in model.params().iter() {
        for v in p.value.data() {
            if wide {
                w.write_all(&v.as_f64().to_le_bytes()).map_err(io)?;
            } else {
                w.write_all(&(v.as_f64() as f32).to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// Reads a checkpoint into a model of precision `T`, converting values if needed.
pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<(Cign<T>, serde_json::Value)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| ck("file too short for the magic bytes"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ck("bad magic bytes; not a checkpoint"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| ck("truncated version field"))?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(ck(format!("unsupported checkpoint version {version}; this build reads {CHECKPOINT_VERSION}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| ck("truncated header length"))?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(ck(format!("header length {len} exceeds {MAX_HEADER}")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(|_| ck("truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| ck(format!("malformed header: {e}")))?;
    let width = match header.precision.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(ck(format!("unknown precision {other:?}"))),
    };
    let topo = header.tree.topology();
    if header.topology.branching != header.tree.branching || header.topology.nodes != topo.len() {
        return Err(ck("topology header disagrees with the stored tree"));
    }
    let mut values = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let mut buf = vec![0u8; n * width];
        r.read_exact(&mut buf).map_err(|_| ck(format!("payload truncated in parameter {}", p.name)))?;
        let data: Vec<T> = if width == 8 {
            buf.chunks_exact(8).map(|b| T::of(f64::from_le_bytes(b.try_into().expect("8 bytes")))).collect()
        } else {
            buf.chunks_exact(4).map(|b| T::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)).collect()
        };
        values.push((p.name.clone(), Tensor::new(p.shape.clone(), data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| ck(format!("read failed: {e}")))? != 0 {
        return Err(ck("trailing bytes after the payload"));
    }
    let model = Cign::from_values(header.tree, values)?;
    Ok((model, header.meta))
}

pub fn save_checkpoint<T: Scalar>(model: &Cign<T>, meta: serde_json::Value, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| CignError::io(path, e))?;
    write_checkpoint(model, meta, BufWriter::new(f))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(Cign<T>, serde_json::Value)> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| CignError::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}
