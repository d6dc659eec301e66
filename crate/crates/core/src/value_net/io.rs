//! Model files: a JSON document whose `weights` field carries the
//! parameters as base64 little-endian f64 in [`ValueNet::parameters`] order.

use std::io::{Read, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Activation, NetError, Normalization, ValueNet};
use crate::dynamics::SafetyCorridor;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub state_dim: usize,
    pub hidden: Vec<usize>,
}

/// How a model was produced; informational only.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub system: String,
    pub strategy: String,
    pub epochs: usize,
    pub batch_size: usize,
    /// Hex FNV-1a of the parameters, checked on load.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub architecture: Architecture,
    pub activation: Activation,
    pub normalization: Normalization,
    pub horizon: f64,
    pub gamma: f64,
    pub seed: u64,
    pub constraint: SafetyCorridor,
    pub provenance: Provenance,
    pub weights: String,
}

impl ModelFile {
    pub fn from_net(net: &ValueNet, gamma: f64, seed: u64, mut provenance: Provenance) -> Self {
        let bytes: Vec<u8> = net
            .parameters()
            .iter()
            .flat_map(|p| p.to_le_bytes())
            .collect();
        provenance.checksum = format!("{:016x}", net.checksum());
        Self {
            schema_version: MODEL_SCHEMA_VERSION,
            architecture: Architecture {
                state_dim: net.state_dim(),
                hidden: net.hidden_widths(),
            },
            activation: net.activation,
            normalization: net.norm.clone(),
            horizon: net.norm.horizon,
            gamma,
            seed,
            constraint: net.constraint,
            provenance,
            weights: B64.encode(bytes),
        }
    }

    pub fn to_net(&self) -> Result<ValueNet, NetError> {
        if (self.horizon - self.normalization.horizon).abs() > 1e-12 {
            return Err(NetError::Format(
                "horizon disagrees with normalization".into(),
            ));
        }
        let mut net = ValueNet::new(
            self.architecture.state_dim,
            &self.architecture.hidden,
            self.activation,
            self.normalization.clone(),
            self.constraint,
            0,
        )?;
        let bytes = B64
            .decode(&self.weights)
            .map_err(|e| NetError::Format(format!("weights: {e}")))?;
        if bytes.len() != 8 * net.parameter_count() {
            return Err(NetError::Format(format!(
                "{} weight bytes for {} parameters",
                bytes.len(),
                net.parameter_count()
            )));
        }
        let params: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
            .collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(NetError::Format("non-finite weight".into()));
        }
        net.set_parameters(&params)?;
        if !self.provenance.checksum.is_empty()
            && self.provenance.checksum != format!("{:016x}", net.checksum())
        {
            return Err(NetError::Format("weight checksum mismatch".into()));
        }
        Ok(net)
    }
}

pub fn save_model<W: Write>(model: &ModelFile, mut w: W) -> Result<(), NetError> {
    serde_json::to_writer_pretty(&mut w, model).map_err(|e| NetError::Format(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Parse a model file, rejecting other schema versions before looking at
/// the rest of the document.
pub fn load_model<R: Read>(r: R) -> Result<ModelFile, NetError> {
    let doc: serde_json::Value =
        serde_json::from_reader(r).map_err(|e| NetError::Format(e.to_string()))?;
    let found = doc
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| NetError::Format("missing schema_version".into()))?;
    if found != MODEL_SCHEMA_VERSION as u64 {
        return Err(NetError::Version {
            found: found.min(u32::MAX as u64) as u32,
            expected: MODEL_SCHEMA_VERSION,
        });
    }
    serde_json::from_value(doc).map_err(|e| NetError::Format(e.to_string()))
}
