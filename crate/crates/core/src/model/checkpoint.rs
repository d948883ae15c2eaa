//! Checkpoint file: 8-byte magic, little-endian u64 header length, JSON
//! header, then the raw little-endian f32 payload.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{FusionNet, FusionNetConfig};
use crate::adapter::AdapterSpec;
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"S2RCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMeta {
    pub epochs: usize,
    pub seed: u64,
    pub source_domain: String,
    /// Calibration constant for test-time uncertainty, if measured.
    #[serde(default)]
    pub uncertainty_scale: Option<f64>,
    #[serde(default)]
    pub history: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: FusionNet,
    pub meta: TrainMeta,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: FusionNetConfig,
    meta: TrainMeta,
    tensors: Vec<TensorEntry>,
    adapters: Option<AdapterSpec>,
}

/// Parameter names a network with this layout must have.
fn expected_names(config: &FusionNetConfig, adapters: Option<&AdapterSpec>) -> BTreeSet<String> {
    let mut names = BTreeSet::new();
    for (layer, ..) in config.layers() {
        names.insert(format!("{layer}.weight"));
        names.insert(format!("{layer}.bias"));
    }
    if let Some(spec) = adapters {
        for layer in spec.layers.keys() {
            for suffix in ["share.down", "share.up", "transfer.down", "transfer.up", "alpha_s", "alpha_t"] {
                names.insert(format!("adapters/{layer}/{suffix}"));
            }
        }
    }
    names
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in &self.net.params {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
                len: t.numel(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            config: self.net.config,
            meta: self.meta.clone(),
            tensors,
            adapters: self.net.adapters.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} is not supported (expected {FORMAT_VERSION})",
                header.version
            )));
        }
        header.config.validate()?;
        let payload = &body[hlen..];
        let mut params = ParamStore::new();
        for e in &header.tensors {
            let end = e.offset + 4 * e.len;
            if end > payload.len() {
                return Err(Error::Format(format!("tensor {} runs past the payload", e.name)));
            }
            let data = payload[e.offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if params.insert(e.name.clone(), Tensor::new(&e.shape, data)?).is_some() {
                return Err(Error::Format(format!("tensor {} stored twice", e.name)));
            }
        }
        let expected = expected_names(&header.config, header.adapters.as_ref());
        let found: BTreeSet<String> = params.keys().cloned().collect();
        if expected != found {
            let missing: Vec<_> = expected.difference(&found).collect();
            let extra: Vec<_> = found.difference(&expected).collect();
            return Err(Error::Format(format!("parameter set mismatch: missing {missing:?}, unexpected {extra:?}")));
        }
        Ok(Self {
            net: FusionNet {
                config: header.config,
                params,
                adapters: header.adapters,
            },
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Names and element counts, in storage order.
    pub fn tensor_directory(&self) -> BTreeMap<String, usize> {
        self.net.params.iter().map(|(k, v)| (k.clone(), v.numel())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{inject, AdapterConfig, InjectionPlan};

    fn ckpt() -> Checkpoint {
        let net = FusionNet::new(
            FusionNetConfig {
                base_channels: 6,
                depth: 2,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        Checkpoint {
            net,
            meta: TrainMeta {
                epochs: 2,
                seed: 3,
                source_domain: "A".into(),
                uncertainty_scale: Some(1.5e-4),
                history: vec!["train".into()],
            },
        }
    }

    #[test]
    fn round_trip_bit_exact() {
        let c = ckpt();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let a = Checkpoint {
            net: inject(&c.net, &InjectionPlan::all_pointwise(), &AdapterConfig::default()).unwrap(),
            meta: c.meta.clone(),
        };
        assert_eq!(Checkpoint::from_bytes(&a.to_bytes().unwrap()).unwrap(), a);
    }

    #[test]
    fn corrupted_magic_and_version() {
        let mut bytes = ckpt().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));

        let bytes = ckpt().to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[16..16 + hlen].to_vec()).unwrap();
        let patched = header.replacen("\"version\":1", "\"version\":7", 1);
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(patched.len() as u64).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[16 + hlen..]);
        match Checkpoint::from_bytes(&out) {
            Err(Error::Format(m)) => assert!(m.contains("version 7")),
            other => panic!("{other:?}"),
        }
    }
}
