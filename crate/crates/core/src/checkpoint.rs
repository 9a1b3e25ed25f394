//! Versioned binary checkpoints (`VITAL-CKPT-1`): a JSON header describing
//! the run followed by raw little-endian `f64` blobs for every parameter
//! and optimizer tensor, in a fixed order so identical state produces
//! identical bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::rng::RngState;
use crate::textenc::Vocabulary;
use crate::train::RunConfig;

pub const FORMAT_ID: &str = "VITAL-CKPT-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Phase1,
    Phase2,
}

/// Full training state required to resume or evaluate a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub phase: Phase,
    pub config: RunConfig,
    pub num_classes: usize,
    pub vocab: Vocabulary,
    pub params: Params,
    /// RMSProp accumulators, keyed by parameter name.
    pub opt_state: IndexMap<String, ArrayD<f64>>,
    /// Iterations (phase 1) or epochs (phase 2) completed.
    pub iteration: u64,
    /// Named random streams captured at save time.
    pub rng_states: Vec<(String, RngState)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    phase: Phase,
    config: RunConfig,
    num_classes: usize,
    vocab: Vocabulary,
    iteration: u64,
    rng_states: Vec<(String, RngState)>,
    params: Vec<ArrayEntry>,
    opt_state: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

fn write_blob(buf: &mut Vec<u8>, arr: &ArrayD<f64>) {
    let std = arr.as_standard_layout();
    for &v in std.as_slice().unwrap() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_blob(bytes: &[u8], offset: &mut usize, shape: &[usize]) -> Result<ArrayD<f64>> {
    let n: usize = shape.iter().product();
    let need = n * 8;
    if *offset + need > bytes.len() {
        return Err(Error::Checkpoint(format!(
            "truncated blob section: need {need} bytes at {offset}, have {}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let start = *offset + i * 8;
        let mut le = [0u8; 8];
        le.copy_from_slice(&bytes[start..start + 8]);
        data.push(f64::from_le_bytes(le));
    }
    *offset += need;
    ArrayD::from_shape_vec(shape.to_vec(), data)
        .map_err(|e| Error::Checkpoint(format!("blob shape mismatch: {e}")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: FORMAT_ID.to_string(),
            phase: self.phase,
            config: self.config.clone(),
            num_classes: self.num_classes,
            vocab: self.vocab.clone(),
            iteration: self.iteration,
            rng_states: self.rng_states.clone(),
            params: self
                .params
                .iter()
                .map(|(name, arr)| ArrayEntry {
                    name: name.to_string(),
                    shape: arr.shape().to_vec(),
                })
                .collect(),
            opt_state: self
                .opt_state
                .iter()
                .map(|(name, arr)| ArrayEntry {
                    name: name.clone(),
                    shape: arr.shape().to_vec(),
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(FORMAT_ID.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (_, arr) in self.params.iter() {
            write_blob(&mut out, arr);
        }
        for arr in self.opt_state.values() {
            write_blob(&mut out, arr);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let magic_len = FORMAT_ID.len() + 1;
        if bytes.len() < magic_len + 8 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let found = &bytes[..magic_len - 1];
        if found != FORMAT_ID.as_bytes() || bytes[magic_len - 1] != b'\n' {
            return Err(Error::CheckpointVersion {
                expected: FORMAT_ID.to_string(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let mut len_le = [0u8; 8];
        len_le.copy_from_slice(&bytes[magic_len..magic_len + 8]);
        let header_len = u64::from_le_bytes(len_le) as usize;
        let header_start = magic_len + 8;
        if header_start + header_len > bytes.len() {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&bytes[header_start..header_start + header_len])?;
        if header.format != FORMAT_ID {
            return Err(Error::CheckpointVersion {
                expected: FORMAT_ID.to_string(),
                found: header.format,
            });
        }
        let mut vocab = header.vocab;
        vocab.rebuild_index();

        let mut offset = header_start + header_len;
        let mut params = Params::new();
        for entry in &header.params {
            params.insert(entry.name.clone(), read_blob(bytes, &mut offset, &entry.shape)?);
        }
        let mut opt_state = IndexMap::new();
        for entry in &header.opt_state {
            opt_state.insert(entry.name.clone(), read_blob(bytes, &mut offset, &entry.shape)?);
        }
        if offset != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "trailing bytes: read {offset}, file has {}",
                bytes.len()
            )));
        }
        Ok(Self {
            phase: header.phase,
            config: header.config,
            num_classes: header.num_classes,
            vocab,
            params,
            opt_state,
            iteration: header.iteration,
            rng_states: header.rng_states,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn rng_state(&self, name: &str) -> Option<&RngState> {
        self.rng_states
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
    }
}
