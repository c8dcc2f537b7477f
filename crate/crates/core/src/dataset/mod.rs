//! Loading, validation and snapshotting of the three input artifacts:
//! per-neuron activation profiles, inter-layer weights and token embeddings.

mod embeddings;
mod profiles;
mod weights;

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use embeddings::{
    load_embeddings, read_embeddings, read_vocab, write_embeddings, write_vocab, EmbeddingTable,
    EMBEDDINGS_MAGIC,
};
pub use profiles::{load_profiles, read_profiles, write_profiles, ProfileMap};
pub use weights::{load_weights, read_weights, write_weights, LayerWeights, WEIGHTS_MAGIC};

use crate::error::{Error, Result};

/// Identity of a formal neuron: layer plus index within that layer.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct NeuronRef {
    pub layer: u32,
    pub index: u32,
}

impl NeuronRef {
    pub const fn new(layer: u32, index: u32) -> Self {
        Self { layer, index }
    }
}

impl fmt::Display for NeuronRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.layer, self.index)
    }
}

/// One token in a neuron's activation profile. `surface` is the verbatim
/// token string; comparisons always go through `token_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub token_id: u32,
    pub surface: String,
    pub activation: f64,
}

/// A neuron's token -> mean activation mapping, sorted by descending
/// activation with ties broken by ascending token id.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationProfile {
    neuron: NeuronRef,
    entries: Vec<TokenEntry>,
}

impl ActivationProfile {
    pub fn new(neuron: NeuronRef, mut entries: Vec<TokenEntry>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !e.activation.is_finite() {
                return Err(Error::Validation(format!(
                    "neuron {neuron}: token {} has non-finite activation",
                    e.token_id
                )));
            }
            if !seen.insert(e.token_id) {
                return Err(Error::Validation(format!(
                    "neuron {neuron}: token {} listed twice",
                    e.token_id
                )));
            }
        }
        entries.sort_by(|a, b| {
            b.activation
                .total_cmp(&a.activation)
                .then(a.token_id.cmp(&b.token_id))
        });
        Ok(Self { neuron, entries })
    }

    pub fn neuron(&self) -> NeuronRef {
        self.neuron
    }

    pub fn entries(&self) -> &[TokenEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Activation of `token_id` on this neuron, if the token is in the profile.
    pub fn activation_of(&self, token_id: u32) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.token_id == token_id)
            .map(|e| e.activation)
    }

    pub fn activation_map(&self) -> std::collections::HashMap<u32, f64> {
        self.entries
            .iter()
            .map(|e| (e.token_id, e.activation))
            .collect()
    }
}

/// Where a dataset came from and a hash of its canonical content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub content_hash: String,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (sha256:{})", self.source, self.content_hash)
    }
}

/// Immutable, cross-validated snapshot of profiles, weights and embeddings.
#[derive(Debug, Clone)]
pub struct ModelDataset {
    profiles: ProfileMap,
    weights: LayerWeights,
    embeddings: EmbeddingTable,
    provenance: Provenance,
}

impl ModelDataset {
    pub fn profiles(&self) -> &ProfileMap {
        &self.profiles
    }

    pub fn profile(&self, neuron: NeuronRef) -> Option<&ActivationProfile> {
        self.profiles.get(&neuron)
    }

    pub fn weights(&self) -> &LayerWeights {
        &self.weights
    }

    pub fn embeddings(&self) -> &EmbeddingTable {
        &self.embeddings
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn source_layer(&self) -> u32 {
        self.weights.source_layer()
    }

    pub fn target_layer(&self) -> u32 {
        self.weights.target_layer()
    }

    /// All neurons of the target layer, in index order.
    pub fn targets(&self) -> impl Iterator<Item = NeuronRef> + '_ {
        let layer = self.target_layer();
        (0..self.weights.target_size() as u32).map(move |i| NeuronRef::new(layer, i))
    }

    /// Surface string from the vocabulary, when one was loaded.
    pub fn surface(&self, token_id: u32) -> Option<&str> {
        self.embeddings.surface(token_id)
    }

    /// Writes the dataset to `dir` in the ingest formats
    /// (`profiles.jsonl`, `weights.bin`, `embeddings.bin`, `vocab.jsonl`).
    pub fn write_to_dir(&self, dir: &Path) -> Result<DatasetPaths> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = DatasetPaths::in_dir(dir);
        write_profiles(&paths.profiles, &self.profiles)?;
        write_weights(&paths.weights, &self.weights)?;
        write_embeddings(&paths.embeddings, &self.embeddings)?;
        if self.embeddings.surfaces().is_some() {
            write_vocab(&paths.vocab, &self.embeddings)?;
        }
        Ok(paths)
    }
}

/// Conventional file names of a dataset directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub profiles: std::path::PathBuf,
    pub weights: std::path::PathBuf,
    pub embeddings: std::path::PathBuf,
    pub vocab: std::path::PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            profiles: dir.join("profiles.jsonl"),
            weights: dir.join("weights.bin"),
            embeddings: dir.join("embeddings.bin"),
            vocab: dir.join("vocab.jsonl"),
        }
    }

    /// Loads and assembles the dataset. The vocabulary file is optional.
    pub fn load(&self, source_layer: u32) -> Result<ModelDataset> {
        let profiles = load_profiles(&self.profiles)?;
        let weights = load_weights(&self.weights, source_layer)?;
        let mut embeddings = load_embeddings(&self.embeddings)?;
        if self.vocab.exists() {
            let surfaces = read_vocab(&self.vocab, embeddings.vocab_size())?;
            embeddings = embeddings.with_surfaces(surfaces)?;
        }
        let source = format!(
            "profiles={} weights={} embeddings={}",
            self.profiles.display(),
            self.weights.display(),
            self.embeddings.display()
        );
        assemble_dataset(profiles, weights, embeddings, source)
    }
}

const MAX_LISTED_OFFENDERS: usize = 20;

/// Cross-validates the three components and freezes them into a dataset.
pub fn assemble_dataset(
    profiles: ProfileMap,
    weights: LayerWeights,
    embeddings: EmbeddingTable,
    source: impl Into<String>,
) -> Result<ModelDataset> {
    let mut problems = Vec::new();
    let mut dangling = 0usize;
    for (neuron, profile) in &profiles {
        let size = if neuron.layer == weights.source_layer() {
            weights.source_size()
        } else if neuron.layer == weights.target_layer() {
            weights.target_size()
        } else {
            problems.push(format!(
                "neuron {neuron}: layer {} not in {{{}, {}}}",
                neuron.layer,
                weights.source_layer(),
                weights.target_layer()
            ));
            continue;
        };
        if neuron.index as usize >= size {
            problems.push(format!(
                "neuron {neuron}: index out of range for layer of size {size}"
            ));
        }
        for e in profile.entries() {
            if !embeddings.contains(e.token_id) {
                dangling += 1;
                if problems.len() < MAX_LISTED_OFFENDERS {
                    problems.push(format!(
                        "neuron {neuron}: token {} has no embedding",
                        e.token_id
                    ));
                }
            }
        }
    }
    if !problems.is_empty() {
        let mut msg = problems.join("; ");
        if dangling > 0 {
            msg.push_str(&format!(" ({dangling} dangling token reference(s) in total)"));
        }
        return Err(Error::Validation(msg));
    }
    let content_hash = content_hash(&profiles, &weights, &embeddings)?;
    Ok(ModelDataset {
        profiles,
        weights,
        embeddings,
        provenance: Provenance {
            source: source.into(),
            content_hash,
        },
    })
}

fn content_hash(
    profiles: &ProfileMap,
    weights: &LayerWeights,
    embeddings: &EmbeddingTable,
) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    profiles::encode_profiles(&mut buf, profiles)?;
    hasher.update(&buf);
    buf.clear();
    weights::encode_weights(&mut buf, weights);
    hasher.update(&buf);
    buf.clear();
    embeddings::encode_embeddings(&mut buf, embeddings);
    hasher.update(&buf);
    if embeddings.surfaces().is_some() {
        buf.clear();
        embeddings::encode_vocab(&mut buf, embeddings)?;
        hasher.update(&buf);
    }
    Ok(hex::encode(hasher.finalize()))
}
