//! Binary checkpoint container.
//!
//! ```text
//! "DEADNET1"                 8-byte magic
//! u32 LE                     header length H
//! H bytes                    UTF-8 JSON header (format version, spec, tensor table)
//! f32 LE × Σ tensor lengths  per layer: weights, bias, BN scale/shift/running stats
//! u32 LE                     CRC-32 of everything between magic and checksum
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{LayerParams, Network};
use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DEADNET1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    layer: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: NetworkSpec,
    iteration: u64,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

/// A trained network together with the counters needed to resume or reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub iteration: u64,
    pub seed: u64,
}

fn layer_tensors(p: &LayerParams<f32>) -> Vec<(&'static str, &Tensor<f32>)> {
    let mut out = Vec::new();
    if let Some(w) = &p.weights {
        out.push(("weights", w));
    }
    if let Some(b) = &p.bias {
        out.push(("bias", b));
    }
    if let Some(bn) = &p.bn {
        out.push(("bn_scale", &bn.scale));
        out.push(("bn_shift", &bn.shift));
        out.push(("bn_running_mean", &bn.running.mean));
        out.push(("bn_running_var", &bn.running.var));
    }
    out
}

fn layer_tensors_mut(p: &mut LayerParams<f32>) -> Vec<&mut Tensor<f32>> {
    let mut out = Vec::new();
    if let Some(w) = p.weights.as_mut() {
        out.push(w);
    }
    if let Some(b) = p.bias.as_mut() {
        out.push(b);
    }
    if let Some(bn) = p.bn.as_mut() {
        out.push(&mut bn.scale);
        out.push(&mut bn.shift);
        out.push(&mut bn.running.mean);
        out.push(&mut bn.running.var);
    }
    out
}

fn table(net: &Network<f32>) -> Vec<TensorEntry> {
    net.spec()
        .layers
        .iter()
        .zip(net.layers())
        .flat_map(|(spec, p)| {
            layer_tensors(p).into_iter().map(|(name, t)| TensorEntry {
                layer: spec.name.clone(),
                name: name.into(),
                shape: t.shape().to_vec(),
            })
        })
        .collect()
}

impl Checkpoint {
    pub fn new(network: Network<f32>, iteration: u64, seed: u64) -> Self {
        Self { network, iteration, seed }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            spec: self.network.spec().clone(),
            iteration: self.iteration,
            seed: self.seed,
            tensors: table(&self.network),
        };
        let header = serde_json::to_vec(&header)?;
        let mut body = Vec::new();
        body.extend_from_slice(&(header.len() as u32).to_le_bytes());
        body.extend_from_slice(&header);
        for p in self.network.layers() {
            for (_, t) in layer_tensors(p) {
                for v in t.data() {
                    body.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&body);
        let mut out = Vec::with_capacity(MAGIC.len() + body.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < MAGIC.len() + 8 {
            return Err(corrupt("file truncated"));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, tail) = bytes[MAGIC.len()..].split_at(bytes.len() - MAGIC.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch (corrupt or truncated file)"));
        }
        let header_len = u32::from_le_bytes(body[..4].try_into().unwrap()) as usize;
        let header_bytes = body.get(4..4 + header_len).ok_or_else(|| corrupt("header truncated"))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} unsupported (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let mut network = Network::<f32>::new(header.spec)?;
        if table(&network) != header.tensors {
            return Err(corrupt("tensor table does not match the recorded spec"));
        }
        let mut payload = body[4 + header_len..].chunks_exact(4);
        let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() != expected || !payload.remainder().is_empty() {
            return Err(corrupt("payload length does not match tensor table"));
        }
        for p in network.layers_mut() {
            for t in layer_tensors_mut(p) {
                for v in t.data_mut() {
                    *v = f32::from_le_bytes(payload.next().unwrap().try_into().unwrap());
                }
            }
        }
        Ok(Self { network, iteration: header.iteration, seed: header.seed })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Load and require the stored architecture to equal `expected`.
    pub fn load_matching(path: impl AsRef<Path>, expected: &NetworkSpec) -> Result<Self> {
        let ckpt = Self::load(path)?;
        check_matches(ckpt.network.spec(), expected)?;
        Ok(ckpt)
    }
}

/// Error naming the first layer where `found` differs from `expected`.
pub fn check_matches(found: &NetworkSpec, expected: &NetworkSpec) -> Result<()> {
    if found.input != expected.input {
        return Err(Error::LayerMismatch {
            layer: "input".into(),
            detail: format!("{:?} vs expected {:?}", found.input, expected.input),
        });
    }
    for (i, (f, e)) in found.layers.iter().zip(&expected.layers).enumerate() {
        if f != e {
            return Err(Error::LayerMismatch {
                layer: e.name.clone(),
                detail: format!("layer {i} is {:?}, expected {:?}", f.kind, e.kind),
            });
        }
    }
    if found.layers.len() != expected.layers.len() {
        let i = found.layers.len().min(expected.layers.len());
        let name = expected.layers.get(i).or(found.layers.get(i)).map(|l| l.name.clone()).unwrap_or_default();
        return Err(Error::LayerMismatch {
            layer: name,
            detail: format!("{} layers, expected {}", found.layers.len(), expected.layers.len()),
        });
    }
    if found.classes != expected.classes {
        return Err(Error::LayerMismatch {
            layer: "score".into(),
            detail: format!("{} classes, expected {}", found.classes, expected.classes),
        });
    }
    Ok(())
}
