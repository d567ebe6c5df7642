//! Checkpoints as a text manifest plus one raw little-endian `f32` blob.
//!
//! Manifest layout:
//!
//! ```text
//! # chainfed-checkpoint 1
//! # input=tokens
//! # adapter_activation=gelu
//! embed 64,32 f32 0
//! backbone.1.ln.gain 32 f32 8192
//! ...
//! ```
//!
//! Each entry is `name shape dtype byte-offset`. The blob lives next to the
//! manifest at `<manifest>.bin`. Values are stored as `f32`, so a stack in a
//! wider type round-trips exactly only at `f32` precision.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kernels::Activation;
use crate::model::{InputKind, ModelStack};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &str = "# chainfed-checkpoint 1";

pub fn blob_path(manifest: &Path) -> PathBuf {
    let mut s = manifest.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Gelu => "gelu",
        Activation::Relu => "relu",
        Activation::Tanh => "tanh",
        Activation::Identity => "identity",
    }
}

fn parse_activation(s: &str) -> Result<Activation> {
    Ok(match s {
        "gelu" => Activation::Gelu,
        "relu" => Activation::Relu,
        "tanh" => Activation::Tanh,
        "identity" => Activation::Identity,
        other => return Err(Error::Checkpoint(format!("unknown adapter activation `{other}`"))),
    })
}

/// Renders the manifest and blob without touching the filesystem.
pub fn encode<S: Scalar>(stack: &ModelStack<S>) -> (String, Vec<u8>) {
    let input = match stack.input {
        InputKind::Tokens { .. } => "tokens",
        InputKind::Features { .. } => "features",
    };
    let activation = stack
        .layers
        .first()
        .map_or(Activation::Gelu, |l| l.adapter.activation);
    let mut manifest = format!(
        "{MAGIC}\n# input={input}\n# adapter_activation={}\n",
        activation_name(activation)
    );
    let mut blob = Vec::new();
    for (name, t) in stack.named_tensors() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{name} {} f32 {}\n", shape.join(","), blob.len()));
        for &v in t.data() {
            blob.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    (manifest, blob)
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn parse_entry(line: &str, lineno: usize) -> Result<Entry> {
    let bad = |msg: &str| Error::Checkpoint(format!("manifest line {lineno}: {msg}"));
    let fields: Vec<&str> = line.split_whitespace().collect();
    let [name, shape, dtype, offset] = fields[..] else {
        return Err(bad("expected `name shape dtype offset`"));
    };
    if dtype != "f32" {
        return Err(bad(&format!("unsupported dtype `{dtype}`")));
    }
    let shape = if shape.is_empty() {
        Vec::new()
    } else {
        shape
            .split(',')
            .map(|d| d.parse::<usize>().map_err(|_| bad("bad shape")))
            .collect::<Result<_>>()?
    };
    let offset = offset.parse().map_err(|_| bad("bad offset"))?;
    Ok(Entry {
        name: name.to_string(),
        shape,
        offset,
    })
}

/// Inverse of [`encode`].
pub fn decode<S: Scalar>(manifest: &str, blob: &[u8]) -> Result<ModelStack<S>> {
    let mut lines = manifest.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == MAGIC => {}
        _ => return Err(Error::Checkpoint("missing checkpoint header".into())),
    }
    let mut input = None;
    let mut activation = Activation::Gelu;
    let mut entries = Vec::new();
    for (k, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            match meta.trim().split_once('=') {
                Some(("input", v)) => input = Some(v.to_string()),
                Some(("adapter_activation", v)) => activation = parse_activation(v)?,
                _ => {}
            }
            continue;
        }
        entries.push(parse_entry(line, k + 1)?);
    }
    let expected: usize = entries.iter().map(|e| 4 * e.shape.iter().product::<usize>()).sum();
    if expected != blob.len() {
        return Err(Error::Checkpoint(format!(
            "blob length mismatch: manifest describes {expected} bytes, blob has {}",
            blob.len()
        )));
    }
    let mut map = BTreeMap::new();
    for e in entries {
        let numel: usize = e.shape.iter().product();
        let bytes = blob.get(e.offset..e.offset + 4 * numel).ok_or_else(|| {
            Error::Checkpoint(format!("blob length mismatch at tensor `{}`", e.name))
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| S::from_f64_lossy(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        let t = Tensor::new(e.shape, data)?;
        if map.insert(e.name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{}`", e.name)));
        }
    }
    let rows = map
        .get(crate::model::names::EMBED)
        .map(|t| t.shape().first().copied().unwrap_or(0))
        .ok_or_else(|| Error::Checkpoint("missing tensor `embed`".into()))?;
    let input = match input.as_deref() {
        Some("tokens") => InputKind::Tokens { vocab: rows },
        Some("features") => InputKind::Features { dim: rows },
        _ => return Err(Error::Checkpoint("manifest lacks a valid `# input=` line".into())),
    };
    let mut stack = ModelStack::from_named(input, map)?;
    for layer in &mut stack.layers {
        layer.adapter.activation = activation;
    }
    Ok(stack)
}

/// Writes `path` (manifest) and `<path>.bin` (blob).
pub fn save_checkpoint<S: Scalar>(stack: &ModelStack<S>, path: &Path) -> Result<()> {
    let (manifest, blob) = encode(stack);
    let bin = blob_path(path);
    fs::write(path, manifest).map_err(|e| Error::io(path, e))?;
    fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ModelStack<S>> {
    let manifest = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bin = blob_path(path);
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    decode(&manifest, &blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerKind, StackSpec};

    fn spec(kind: LayerKind) -> StackSpec {
        StackSpec {
            layers: 2,
            hidden: 4,
            adapter_dim: 2,
            ffn: 6,
            kind,
            input: InputKind::Tokens { vocab: 9 },
            classes: 3,
            backbone_scale: 1.0,
            adapter_activation: Activation::Tanh,
        }
    }

    #[test]
    fn encode_decode_roundtrip() {
        for kind in [LayerKind::Mlp, LayerKind::AttnLite] {
            let stack = ModelStack::<f32>::init(&spec(kind), 3).unwrap();
            let (m, b) = encode(&stack);
            let back: ModelStack<f32> = decode(&m, &b).unwrap();
            assert_eq!(back, stack);
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let stack = ModelStack::<f64>::init(&spec(LayerKind::Mlp), 3).unwrap();
        let (m, b) = encode(&stack);
        let err = decode::<f64>(&m, &b[..b.len() - 4]).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");
    }

    #[test]
    fn unknown_name_is_rejected() {
        let stack = ModelStack::<f64>::init(&spec(LayerKind::Mlp), 3).unwrap();
        let (mut m, mut b) = encode(&stack);
        m.push_str(&format!("mystery.tensor 1 f32 {}\n", b.len()));
        b.extend_from_slice(&1.0f32.to_le_bytes());
        let err = decode::<f64>(&m, &b).unwrap_err();
        assert!(err.to_string().contains("mystery.tensor"), "{err}");
    }
}
