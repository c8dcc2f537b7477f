use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ActivationProfile, NeuronRef, TokenEntry};
use crate::error::{Error, Result};

pub type ProfileMap = BTreeMap<NeuronRef, ActivationProfile>;

#[derive(Serialize, Deserialize)]
struct TokenRecord {
    id: u32,
    t: String,
    a: f64,
}

#[derive(Serialize, Deserialize)]
struct ProfileRecord {
    layer: u32,
    neuron: u32,
    tokens: Vec<TokenRecord>,
}

/// Loads activation profiles from a JSONL file, one neuron per line.
pub fn load_profiles(path: &Path) -> Result<ProfileMap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_profiles(BufReader::new(file), path)
}

/// Parses profile records from any reader; `origin` only labels errors.
pub fn read_profiles<R: BufRead>(reader: R, origin: &Path) -> Result<ProfileMap> {
    let mut out = ProfileMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProfileRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let neuron = NeuronRef::new(rec.layer, rec.neuron);
        let entries = rec
            .tokens
            .into_iter()
            .map(|t| TokenEntry {
                token_id: t.id,
                surface: t.t,
                activation: t.a,
            })
            .collect();
        let profile = ActivationProfile::new(neuron, entries)?;
        if out.insert(neuron, profile).is_some() {
            return Err(Error::Validation(format!(
                "{}:{line_no}: neuron {neuron} appears in more than one record",
                origin.display()
            )));
        }
    }
    Ok(out)
}

pub(crate) fn encode_profiles<W: Write>(mut w: W, profiles: &ProfileMap) -> Result<()> {
    for (neuron, profile) in profiles {
        let rec = ProfileRecord {
            layer: neuron.layer,
            neuron: neuron.index,
            tokens: profile
                .entries()
                .iter()
                .map(|e| TokenRecord {
                    id: e.token_id,
                    t: e.surface.clone(),
                    a: e.activation,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io("<profiles>", e))?;
    }
    Ok(())
}

pub fn write_profiles(path: &Path, profiles: &ProfileMap) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_profiles(&mut w, profiles)?;
    w.flush().map_err(|e| Error::io(path, e))
}
