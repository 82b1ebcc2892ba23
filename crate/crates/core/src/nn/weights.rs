//! Weight files: an 8-byte magic, a little-endian u64 header length, a JSON
//! header listing every tensor, then the tensors as little-endian f32.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TLBWGT01";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    layer: String,
    param: String,
    dims: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    entries: Vec<Entry>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: usize,
    /// Model tensors with no counterpart in the file.
    pub missing: Vec<String>,
    /// File tensors with no counterpart in the model.
    pub unused: Vec<String>,
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut offset = 0;
    for (id, node) in model.graph.nodes.iter().enumerate() {
        for spec in &model.graph.params[id] {
            entries.push(Entry {
                layer: node.name.clone(),
                param: spec.name.to_string(),
                dims: spec.dims.clone(),
                offset,
            });
            offset += spec.len();
        }
    }
    let header = serde_json::to_vec(&Header { entries }).expect("header serialises");
    let mut out = Vec::with_capacity(16 + header.len() + offset * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for buf in model.params.iter().flatten() {
        for v in buf {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes the weights and returns the file size in bytes.
pub fn save(model: &Model, path: &Path) -> Result<u64> {
    let bytes = to_bytes(model);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

/// Copies matching tensors (by layer name and parameter name) into `model`.
/// A tensor whose dimensions disagree is an error.
pub fn load_from_bytes(model: &mut Model, bytes: &[u8], origin: &Path) -> Result<LoadReport> {
    let bad = |message: &str| Error::Weights {
        path: origin.to_path_buf(),
        message: message.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a weights file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body])?;
    let data = &bytes[body..];
    let mut by_key: HashMap<(&str, &str), &Entry> = HashMap::new();
    for e in &header.entries {
        by_key.insert((e.layer.as_str(), e.param.as_str()), e);
    }
    let mut report = LoadReport::default();
    let mut used = std::collections::HashSet::new();
    for (id, node) in model.graph.nodes.iter().enumerate() {
        for (k, spec) in model.graph.params[id].iter().enumerate() {
            let key = (node.name.as_str(), spec.name);
            let Some(e) = by_key.get(&key) else {
                report.missing.push(format!("{}/{}", node.name, spec.name));
                continue;
            };
            if e.dims != spec.dims {
                return Err(bad(&format!(
                    "{}/{} has dims {:?}, model expects {:?}",
                    node.name, spec.name, e.dims, spec.dims
                )));
            }
            let start = e.offset * 4;
            let end = start + spec.len() * 4;
            if end > data.len() {
                return Err(bad("truncated tensor data"));
            }
            let dst = &mut model.params[id][k];
            for (v, chunk) in dst.iter_mut().zip(data[start..end].chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
            used.insert(key);
            report.loaded += 1;
        }
    }
    report.unused = header
        .entries
        .iter()
        .filter(|e| !used.contains(&(e.layer.as_str(), e.param.as_str())))
        .map(|e| format!("{}/{}", e.layer, e.param))
        .collect();
    Ok(report)
}

pub fn load(model: &mut Model, path: &Path) -> Result<LoadReport> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_from_bytes(model, &bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::{Activation, Conv2d, Dense, GraphBuilder, Op, Padding};

    fn tiny(seed: u64) -> Model {
        let mut g = GraphBuilder::new();
        let x = g.input([3, 4, 4]);
        let c = g.node(
            Op::Conv(Conv2d {
                filters: 2,
                kernel: (3, 3),
                stride: (1, 1),
                padding: Padding::Same,
                bias: true,
                activation: Activation::Relu,
            }),
            &[x],
            None,
        );
        let p = g.node(Op::GlobalAvgPool, &[c], None);
        let d = g.node(
            Op::Dense(Dense {
                units: 1,
                bias: true,
                activation: Activation::Sigmoid,
            }),
            &[p],
            None,
        );
        Model::init(g.build(d), seed)
    }

    #[test]
    fn round_trip_restores_every_tensor() {
        let a = tiny(1);
        let mut b = tiny(2);
        assert_ne!(a.params, b.params);
        let report = load_from_bytes(&mut b, &to_bytes(&a), Path::new("mem")).unwrap();
        assert_eq!(report.loaded, 4);
        assert!(report.missing.is_empty() && report.unused.is_empty());
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn rejects_garbage() {
        let mut m = tiny(0);
        assert!(load_from_bytes(&mut m, b"hello world, not weights", Path::new("x")).is_err());
    }
}
