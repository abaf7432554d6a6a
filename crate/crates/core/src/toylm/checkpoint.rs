use std::path::Path;

use super::{ModelConfig, ToyLm};
use crate::arrays::{decode_arrays, encode_arrays, read_arrays, write_arrays};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const KIND: &str = "toylm-checkpoint";

impl ToyLm {
    fn named_arrays(&self) -> Vec<(String, &nalgebra::DMatrix<f64>)> {
        let mut out = Vec::new();
        self.for_each_param(|n, m| out.push((n.to_string(), m)));
        out
    }

    fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "checkpoint_version": CHECKPOINT_VERSION,
            "config": self.config,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_arrays(KIND, self.metadata(), &self.named_arrays())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, arrays) = decode_arrays(bytes)?;
        Self::from_arrays(header, arrays)
    }

    /// SHA-256 of the serialized weights.
    pub fn content_hash(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap_or(0);
        Ok(crate::arrays::hash_hex(&bytes[nl + 1..]))
    }

    fn from_arrays(
        header: crate::arrays::ArrayHeader,
        arrays: Vec<(String, nalgebra::DMatrix<f64>)>,
    ) -> Result<Self> {
        if header.kind != KIND {
            return Err(Error::Format(format!("not a checkpoint: kind {}", header.kind)));
        }
        let config: ModelConfig = serde_json::from_value(
            header
                .metadata
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint header lacks config".into()))?,
        )?;
        let mut model = ToyLm::new(config)?;
        let mut it = arrays.into_iter();
        let mut err = None;
        model.for_each_param_mut(|name, m| {
            if err.is_some() {
                return;
            }
            match it.next() {
                Some((n, a)) if n == name && a.shape() == m.shape() => *m = a,
                Some((n, a)) => {
                    err = Some(Error::Format(format!(
                        "array {n} {:?} does not match expected {name} {:?}",
                        a.shape(),
                        m.shape()
                    )))
                }
                None => err = Some(Error::Format(format!("missing array {name}"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if it.next().is_some() {
            return Err(Error::Format("checkpoint has extra arrays".into()));
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &ToyLm, path: &Path) -> Result<()> {
    write_arrays(path, KIND, model.metadata(), &model.named_arrays())
}

/// Loads a checkpoint; the payload hash is verified before anything is parsed.
pub fn load_checkpoint(path: &Path) -> Result<ToyLm> {
    let (header, arrays) = read_arrays(path)?;
    ToyLm::from_arrays(header, arrays)
}
