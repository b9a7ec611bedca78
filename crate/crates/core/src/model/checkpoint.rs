//! Checkpoint persistence.
//!
//! A checkpoint is a single JSON document: format version, an echo of the
//! run configuration as a flat string map, the iteration counter, the RNG
//! state, every named parameter array, and (when the optimizer is stateful)
//! its slots. Parameter data is base64 of little-endian f64 bytes, so the
//! file is byte-stable across runs: map keys sort canonically (BTreeMap),
//! record order is fixed, and no float ever goes through decimal formatting.
//! RNG words are decimal strings because u64 does not survive every JSON
//! reader as a number.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UdgError};
use crate::grad::Rng;
use crate::model::ModelState;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RngState {
    pub seed: String,
    pub counter: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub iteration: u64,
    pub config: BTreeMap<String, String>,
    pub rng: RngState,
    pub params: Vec<ParamRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub optimizer: Vec<ParamRecord>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub optimizer_step: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

pub fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_f64s(encoded: &str, context: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(encoded)
        .map_err(|e| UdgError::Checkpoint(format!("{context}: bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(UdgError::Checkpoint(format!(
            "{context}: data length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl ParamRecord {
    pub fn from_values(name: impl Into<String>, shape: Vec<usize>, values: &[f64]) -> Self {
        ParamRecord {
            name: name.into(),
            shape,
            data: encode_f64s(values),
        }
    }

    pub fn decode(&self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let values = decode_f64s(&self.data, &self.name)?;
        let expect: usize = self.shape.iter().product();
        if values.len() != expect {
            return Err(UdgError::Checkpoint(format!(
                "parameter {}: shape {:?} wants {expect} values, data holds {}",
                self.name,
                self.shape,
                values.len()
            )));
        }
        Ok((self.name.clone(), self.shape.clone(), values))
    }
}

impl Checkpoint {
    pub fn from_model(
        model: &ModelState,
        iteration: u64,
        rng: &Rng,
        config: BTreeMap<String, String>,
    ) -> Self {
        let (seed, counter) = rng.state();
        let params = model
            .params()
            .into_iter()
            .map(|p| ParamRecord::from_values(p.name.clone(), p.shape.clone(), &p.data))
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            iteration,
            config,
            rng: RngState {
                seed: seed.to_string(),
                counter: counter.to_string(),
            },
            params,
            optimizer: Vec::new(),
            optimizer_step: 0,
        }
    }

    pub fn rng_state(&self) -> Result<Rng> {
        let parse = |s: &str, what: &str| {
            s.parse::<u64>()
                .map_err(|_| UdgError::Checkpoint(format!("rng.{what} is not a u64: {s:?}")))
        };
        Ok(Rng::from_state(
            parse(&self.rng.seed, "seed")?,
            parse(&self.rng.counter, "counter")?,
        ))
    }

    /// Decode every parameter record, validating lengths up front.
    pub fn decoded_params(&self) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
        self.params.iter().map(|r| r.decode()).collect()
    }

    /// Copy all stored parameters into `model`. Decoding and shape checks
    /// complete before any write, so a corrupt record leaves the model
    /// untouched.
    pub fn apply_to(&self, model: &mut ModelState) -> Result<()> {
        let decoded = self.decoded_params()?;
        model.load_params(&decoded)
    }

    pub fn to_json(&self) -> String {
        // BTreeMap keys and fixed struct field order make this canonical
        serde_json::to_string_pretty(self).expect("checkpoint serialization cannot fail")
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut text = ckpt.to_json();
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| {
        UdgError::Checkpoint(format!("{}: not a valid checkpoint: {e}", path.display()))
    })?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(UdgError::Checkpoint(format!(
            "unsupported checkpoint version {} (this build reads {})",
            ckpt.version, CHECKPOINT_VERSION
        )));
    }
    Ok(ckpt)
}
