//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "CGSTEER\0"
//! version      u32
//! header_len   u64
//! header       header_len bytes of JSON: {kind, config, tensors: [{name, shape}], frozen}
//! digest       32 bytes  SHA-256 of header bytes followed by payload bytes
//! payload      f64 little-endian values of every tensor, in header order
//! ```
//!
//! Tensor order is the fixed parameter order of [`ModelWeights::params`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{new_adapter, ClassHead, ModelConfig, ModelWeights, ParamGroup};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

pub const MAGIC: &[u8; 8] = b"CGSTEER\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// `"model"` or `"adapters"`.
    pub kind: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub frozen: Vec<ParamGroup>,
}

/// Raw decoded container: header plus one value vector per tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub values: Vec<Vec<f64>>,
}

pub fn write_container(path: &Path, header: &Header, values: &[&[f64]]) -> Result<()> {
    let header_bytes = serde_json::to_vec(header)?;
    let mut payload = Vec::with_capacity(values.iter().map(|v| v.len() * 8).sum());
    for v in values {
        for x in v.iter() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut h = Sha256::new();
    h.update(&header_bytes);
    h.update(&payload);
    let digest = h.finalize();

    let mut out = Vec::with_capacity(8 + 4 + 8 + header_bytes.len() + 32 + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&digest);
    out.extend_from_slice(&payload);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::MalformedCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize.checked_add(header_len).ok_or(Error::DigestMismatch)?;
    if bytes.len() < header_end + 32 {
        return Err(Error::DigestMismatch);
    }
    let header_bytes = &bytes[20..header_end];
    let stored = &bytes[header_end..header_end + 32];
    let payload = &bytes[header_end + 32..];
    let mut h = Sha256::new();
    h.update(header_bytes);
    h.update(payload);
    if h.finalize().as_slice() != stored {
        return Err(Error::DigestMismatch);
    }
    let header: Header = serde_json::from_slice(header_bytes)?;
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(Error::MalformedCheckpoint(format!(
            "payload holds {} bytes, header describes {}",
            payload.len(),
            total * 8
        )));
    }
    let mut values = Vec::with_capacity(header.tensors.len());
    let mut off = 0;
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let v = payload[off..off + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        off += n * 8;
        values.push(v);
    }
    Ok(Container { header, values })
}

pub fn save_checkpoint(w: &ModelWeights, path: &Path) -> Result<()> {
    let params = w.params();
    let header = Header {
        kind: "model".into(),
        config: w.config.clone(),
        tensors: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
        frozen: w.frozen_groups().to_vec(),
    };
    let values: Vec<&[f64]> = params.iter().map(|p| p.data).collect();
    write_container(path, &header, &values)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights> {
    let c = read_container(path)?;
    if c.header.kind != "model" {
        return Err(Error::MalformedCheckpoint(format!(
            "expected a model checkpoint, found kind {:?}",
            c.header.kind
        )));
    }
    weights_from_container(c)
}

/// Load and require the stored config to equal `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<ModelWeights> {
    let w = load_checkpoint(path)?;
    if &w.config != expected {
        let exp_shape = vec![expected.n_layers, expected.d_model, expected.n_heads, expected.vocab_size];
        let found = vec![w.config.n_layers, w.config.d_model, w.config.n_heads, w.config.vocab_size];
        return Err(Error::ShapeMismatch {
            name: "config [n_layers, d_model, n_heads, vocab_size]".into(),
            expected: exp_shape,
            found,
        });
    }
    Ok(w)
}

fn weights_from_container(c: Container) -> Result<ModelWeights> {
    let mut w = ModelWeights::init(&c.header.config)?;
    // Recreate optional structure (adapters, head) named in the header.
    for t in &c.header.tensors {
        if let Some(layer) = adapter_layer(&t.name) {
            if layer == 0 || layer > w.n_layers() {
                return Err(Error::MalformedCheckpoint(format!("bad tensor {}", t.name)));
            }
            if t.name.ends_with("adapter.down") && t.shape.len() == 2 {
                w.layer_mut(layer).adapter = Some(new_adapter(t.shape[0], t.shape[1], 0));
            }
        }
        if t.name == "head.weight" && t.shape.len() == 2 {
            w.head = Some(ClassHead {
                weight: Matrix::zeros(t.shape[0], t.shape[1]),
                bias: vec![0.0; t.shape[1]],
            });
        }
    }
    let expected: Vec<TensorEntry> = w
        .params()
        .iter()
        .map(|p| TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
        })
        .collect();
    check_manifest(&expected, &c.header.tensors)?;
    for (p, v) in w.params_mut().into_iter().zip(c.values) {
        p.data.copy_from_slice(&v);
    }
    for g in c.header.frozen {
        w.set_frozen(g, true);
    }
    Ok(w)
}

fn check_manifest(expected: &[TensorEntry], found: &[TensorEntry]) -> Result<()> {
    for (e, f) in expected.iter().zip(found) {
        if e.name != f.name || e.shape != f.shape {
            return Err(Error::ShapeMismatch {
                name: format!("{} (file has {})", e.name, f.name),
                expected: e.shape.clone(),
                found: f.shape.clone(),
            });
        }
    }
    if expected.len() != found.len() {
        return Err(Error::ShapeMismatch {
            name: "tensor count".into(),
            expected: vec![expected.len()],
            found: vec![found.len()],
        });
    }
    Ok(())
}

pub(crate) fn adapter_layer(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("layers.")?;
    let (num, tail) = rest.split_once('.')?;
    tail.starts_with("adapter.").then(|| num.parse().ok())?
}
