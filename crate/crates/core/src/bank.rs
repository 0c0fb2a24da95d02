//! Versioned on-disk collections of trained directions.
//!
//! A bank is a JSON document bound to one generator fingerprint. Vectors
//! are stored as base64 of little-endian IEEE-754 `f32` values, so a save
//! and load round trip is bit-exact.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "generator_fingerprint": "planted-…",
//!   "space": { "kind": "z", "dim_per_layer": [8] },
//!   "entries": [
//!     {
//!       "name": "left_0",
//!       "part": { "name": "left", "id": 0 },
//!       "layer_range": [0, 0],
//!       "vector": "<base64 f32 LE>",
//!       "training_config": { … },
//!       "final_score": 1.99
//!     }
//!   ]
//! }
//! ```

use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{LelsdError, Result};
use crate::latent::{LatentDirection, LatentSpace, LayerRange};
use crate::segmentation::PartLabel;
use crate::trainer::{TrainingConfig, TrainingReport};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub name: String,
    pub part: PartLabel,
    pub layer_range: LayerRange,
    pub vector: Vec<f32>,
    /// Verbatim snapshot of the configuration that produced the entry.
    pub training_config: serde_json::Value,
    pub final_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionBank {
    pub generator_fingerprint: String,
    pub space: LatentSpace,
    entries: Vec<BankEntry>,
}

impl DirectionBank {
    pub fn new(generator_fingerprint: impl Into<String>, space: LatentSpace) -> Self {
        DirectionBank { generator_fingerprint: generator_fingerprint.into(), space, entries: Vec::new() }
    }

    /// Bank holding the output of one training run.
    pub fn from_training(
        generator_fingerprint: impl Into<String>,
        directions: &[LatentDirection],
        config: &TrainingConfig,
        report: &TrainingReport,
    ) -> Result<Self> {
        let mut bank = DirectionBank::new(generator_fingerprint, config.space.clone());
        let snapshot = serde_json::to_value(config).expect("config serializes");
        for (direction, score) in directions.iter().zip(&report.final_scores) {
            bank.add_direction(direction, snapshot.clone(), *score)?;
        }
        Ok(bank)
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn add_direction(
        &mut self,
        direction: &LatentDirection,
        training_config: serde_json::Value,
        final_score: f64,
    ) -> Result<()> {
        self.space.ensure_same(direction.space())?;
        self.add_entry(BankEntry {
            name: direction.name().to_string(),
            part: direction.part().clone(),
            layer_range: direction.layer_range(),
            vector: direction.values().iter().map(|&v| v as f32).collect(),
            training_config,
            final_score,
        })
    }

    pub fn add_entry(&mut self, entry: BankEntry) -> Result<()> {
        self.check_entry(&entry)?;
        if self.entries.iter().any(|e| e.name == entry.name) {
            return Err(LelsdError::MalformedBank(format!("duplicate entry name `{}`", entry.name)));
        }
        self.entries.push(entry);
        Ok(())
    }

    fn check_entry(&self, entry: &BankEntry) -> Result<()> {
        if entry.vector.len() != self.space.total_dim() {
            return Err(LelsdError::MalformedBank(format!(
                "entry `{}` has {} values, space needs {}",
                entry.name,
                entry.vector.len(),
                self.space.total_dim()
            )));
        }
        if entry.vector.iter().any(|v| !v.is_finite()) || !entry.final_score.is_finite() {
            return Err(LelsdError::MalformedBank(format!("entry `{}` has non-finite values", entry.name)));
        }
        entry
            .layer_range
            .validate(&self.space)
            .map_err(|e| LelsdError::MalformedBank(format!("entry `{}`: {e}", entry.name)))
    }

    pub fn entry(&self, name: &str) -> Option<&BankEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// The named entry as a unit direction in the bank's space.
    pub fn direction(&self, name: &str) -> Result<LatentDirection> {
        let entry =
            self.entry(name).ok_or_else(|| LelsdError::InvalidInput(format!("no direction named `{name}` in bank")))?;
        LatentDirection::new(
            self.space.clone(),
            entry.vector.iter().map(|&v| v as f64).collect(),
            entry.part.clone(),
            entry.layer_range,
            entry.name.clone(),
        )
    }

    pub fn directions(&self) -> Result<Vec<LatentDirection>> {
        self.entries.iter().map(|e| self.direction(&e.name)).collect()
    }

    pub fn ensure_fingerprint(&self, fingerprint: &str) -> Result<()> {
        if self.generator_fingerprint != fingerprint {
            return Err(LelsdError::FingerprintMismatch {
                expected: self.generator_fingerprint.clone(),
                found: fingerprint.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = BankDocument {
            format_version: FORMAT_VERSION,
            generator_fingerprint: Some(self.generator_fingerprint.clone()),
            space: self.space.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| EntryDocument {
                    name: e.name.clone(),
                    part: e.part.clone(),
                    layer_range: e.layer_range,
                    vector: encode_vector(&e.vector),
                    training_config: e.training_config.clone(),
                    final_score: e.final_score,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("bank serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| LelsdError::MalformedBank(format!("not JSON: {e}")))?;
        match raw.get("format_version").and_then(|v| v.as_u64()) {
            Some(FORMAT_VERSION) => {}
            Some(other) => return Err(LelsdError::UnsupportedVersion(other)),
            None => return Err(LelsdError::MalformedBank("missing format_version".into())),
        }
        let doc: BankDocument = serde_json::from_value(raw).map_err(|e| LelsdError::MalformedBank(e.to_string()))?;
        let fingerprint = doc
            .generator_fingerprint
            .filter(|f| !f.is_empty())
            .ok_or_else(|| LelsdError::MalformedBank("missing generator fingerprint".into()))?;
        let mut bank = DirectionBank::new(fingerprint, doc.space);
        for e in doc.entries {
            let vector = decode_vector(&e.vector)
                .map_err(|msg| LelsdError::MalformedBank(format!("entry `{}`: {msg}", e.name)))?;
            bank.add_entry(BankEntry {
                name: e.name,
                part: e.part,
                layer_range: e.layer_range,
                vector,
                training_config: e.training_config,
                final_score: e.final_score,
            })?;
        }
        Ok(bank)
    }
}

/// Writes the bank through a temporary file in the target directory and
/// renames it into place.
pub fn save_bank(bank: &DirectionBank, path: &Path) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bank.to_json().as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn load_bank(path: &Path) -> Result<DirectionBank> {
    DirectionBank::from_json(&std::fs::read_to_string(path)?)
}

#[derive(Serialize, Deserialize)]
struct BankDocument {
    format_version: u64,
    #[serde(default)]
    generator_fingerprint: Option<String>,
    space: LatentSpace,
    entries: Vec<EntryDocument>,
}

#[derive(Serialize, Deserialize)]
struct EntryDocument {
    name: String,
    part: PartLabel,
    layer_range: LayerRange,
    vector: String,
    #[serde(default)]
    training_config: serde_json::Value,
    final_score: f64,
}

fn encode_vector(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode_vector(text: &str) -> std::result::Result<Vec<f32>, String> {
    let bytes = STANDARD.decode(text).map_err(|e| format!("bad base64 payload: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err(format!("payload of {} bytes is not a whole number of f32 values", bytes.len()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}
