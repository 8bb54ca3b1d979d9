//! Checkpoint files: a magic line, a one-line JSON manifest, then every
//! network's parameters as little-endian `f64`, in manifest order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, Regressor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "scsi-checkpoint v1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    step: u64,
    networks: Vec<NetworkEntry>,
}

#[derive(Serialize, Deserialize)]
struct NetworkEntry {
    name: String,
    widths: Vec<usize>,
    architecture: Architecture,
    param_count: usize,
}

/// Named networks plus the optimizer step at which they were saved.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub networks: Vec<(String, Regressor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Regressor> {
        self.networks.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let manifest = Manifest {
        step: ckpt.step,
        networks: ckpt
            .networks
            .iter()
            .map(|(name, r)| NetworkEntry {
                name: name.clone(),
                widths: r.widths().to_vec(),
                architecture: r.architecture().clone(),
                param_count: r.param_count(),
            })
            .collect(),
    };
    let json = serde_json::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::new();
    writeln!(buf, "{CHECKPOINT_MAGIC}")?;
    writeln!(buf, "{json}")?;
    for (_, r) in &ckpt.networks {
        for p in r.params() {
            buf.extend_from_slice(&p.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    line.clear();
    reader.read_line(&mut line)?;
    let manifest: Manifest =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    let mut networks = Vec::with_capacity(manifest.networks.len());
    for entry in manifest.networks {
        if entry.architecture.widths() != entry.widths || entry.architecture.param_count() != entry.param_count {
            return Err(Error::Checkpoint(format!("network `{}`: manifest is inconsistent", entry.name)));
        }
        let mut bytes = vec![0u8; entry.param_count * 8];
        reader
            .read_exact(&mut bytes)
            .map_err(|_| Error::Checkpoint(format!("network `{}`: truncated parameters", entry.name)))?;
        let params = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        networks.push((entry.name, Regressor::from_params(entry.architecture, params)?));
    }
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(Checkpoint { step: manifest.step, networks })
}
