//! Static JSON bundle read by the viewer server.
//!
//! Layout:
//! - `index.json`: run config, provenance and one entry per neuron
//! - `summary.json`: the analysis report
//! - `neurons/L{layer}_N{index}.json`: one document per profiled neuron

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Analysis, ConfigEcho, ConfluenceRecord, DistancingRecord};
use crate::dataset::{ModelDataset, NeuronRef, Provenance};
use crate::error::{Error, Result};
use crate::par;

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRef {
    pub id: u32,
    pub t: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileToken {
    pub id: u32,
    pub t: String,
    pub a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDoc {
    pub label: String,
    pub tokens: Vec<TokenRef>,
}

/// Metrics of one (target, precursor) pair.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PairMetrics {
    pub dispersion_precursor_d: Option<f64>,
    pub dispersion_target_d: Option<f64>,
    /// Confluence of this pair's taken cluster with the other precursors'.
    pub confluence: Vec<ConfluenceRecord>,
    /// Distancing records whose source cluster belongs to this precursor.
    pub distancing: Vec<DistancingRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecursorDoc {
    pub neuron: NeuronRef,
    pub rank: usize,
    pub weight: f64,
    pub taken: Vec<TokenRef>,
    pub left: Vec<TokenRef>,
    pub metrics: PairMetrics,
}

/// A downstream neuron that lists this one as a precursor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetLink {
    pub neuron: NeuronRef,
    pub rank: usize,
    pub weight: f64,
    pub taken_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronDoc {
    pub neuron: NeuronRef,
    pub profile: Vec<ProfileToken>,
    pub core_ids: Vec<u32>,
    pub clusters: Vec<ClusterDoc>,
    pub precursors: Vec<PrecursorDoc>,
    pub targets: Vec<TargetLink>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub neuron: NeuronRef,
    pub path: String,
    pub top_tokens: Vec<String>,
    pub precursors: usize,
    pub targets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexDoc {
    pub version: u32,
    pub config: ConfigEcho,
    pub provenance: Provenance,
    pub source_layer: u32,
    pub target_layer: u32,
    pub neurons: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleSummary {
    pub documents: usize,
    pub hash: String,
}

/// Bundle-relative path of a neuron document.
pub fn neuron_doc_path(n: NeuronRef) -> String {
    format!("neurons/L{}_N{}.json", n.layer, n.index)
}

fn to_json_line<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec(v)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the viewer bundle for `analysis` into `dir`.
pub fn export_viewer_bundle(dataset: &ModelDataset, analysis: &Analysis, dir: &Path) -> Result<BundleSummary> {
    let neurons_dir = dir.join("neurons");
    fs::create_dir_all(&neurons_dir).map_err(|e| Error::io(&neurons_dir, e))?;

    let mut surfaces: HashMap<u32, &str> = HashMap::new();
    for p in dataset.profiles().values() {
        for e in p.entries() {
            surfaces.entry(e.token_id).or_insert(&e.surface);
        }
    }
    let surface = |id: u32| -> String {
        dataset.surface(id).or_else(|| surfaces.get(&id).copied()).unwrap_or_default().to_owned()
    };
    let tokens = |ids: &std::collections::BTreeSet<u32>| -> Vec<TokenRef> {
        ids.iter().map(|&id| TokenRef { id, t: surface(id) }).collect()
    };

    let mut metrics: BTreeMap<(NeuronRef, NeuronRef), PairMetrics> = BTreeMap::new();
    let rec = &analysis.records;
    for d in &rec.dispersion_precursor {
        metrics.entry((d.target, d.precursor)).or_default().dispersion_precursor_d = Some(d.d);
    }
    for d in &rec.dispersion_target {
        metrics.entry((d.target, d.precursor)).or_default().dispersion_target_d = Some(d.d);
    }
    for c in &rec.confluence {
        for p in [c.precursor_x, c.precursor_y] {
            metrics.entry((c.target, p)).or_default().confluence.push(c.clone());
        }
    }
    for d in &rec.distancing {
        metrics.entry((d.target, d.source_cluster.neuron)).or_default().distancing.push(d.clone());
    }

    let mut precursors: BTreeMap<NeuronRef, Vec<PrecursorDoc>> = BTreeMap::new();
    let mut targets: BTreeMap<NeuronRef, Vec<TargetLink>> = BTreeMap::new();
    for e in &analysis.pairs.entries {
        precursors.entry(e.target).or_default().push(PrecursorDoc {
            neuron: e.precursor,
            rank: e.rank,
            weight: e.weight,
            taken: tokens(&e.partition.taken),
            left: tokens(&e.partition.left),
            metrics: metrics.remove(&(e.target, e.precursor)).unwrap_or_default(),
        });
        targets.entry(e.precursor).or_default().push(TargetLink {
            neuron: e.target,
            rank: e.rank,
            weight: e.weight,
            taken_size: e.partition.taken.len(),
        });
    }

    let mut docs: Vec<NeuronDoc> = Vec::with_capacity(dataset.profiles().len());
    for (&n, profile) in dataset.profiles() {
        let clusters = analysis
            .partitions
            .get(&n)
            .map(|p| {
                p.clusters
                    .iter()
                    .map(|c| ClusterDoc { label: c.label.clone(), tokens: tokens(&c.token_ids) })
                    .collect()
            })
            .unwrap_or_default();
        docs.push(NeuronDoc {
            neuron: n,
            profile: profile
                .entries()
                .iter()
                .map(|e| ProfileToken { id: e.token_id, t: e.surface.clone(), a: e.activation })
                .collect(),
            core_ids: analysis.cores.get(n).tokens.iter().map(|t| t.token_id).collect(),
            clusters,
            precursors: precursors.remove(&n).unwrap_or_default(),
            targets: targets.remove(&n).unwrap_or_default(),
        });
    }

    let encoded = par::try_map_ordered(par::Execution::default(), &docs, to_json_line)?;
    for (doc, bytes) in docs.iter().zip(&encoded) {
        write(&dir.join(neuron_doc_path(doc.neuron)), bytes)?;
    }

    let index = IndexDoc {
        version: BUNDLE_VERSION,
        config: analysis.report.config.clone(),
        provenance: analysis.report.provenance.clone(),
        source_layer: dataset.source_layer(),
        target_layer: dataset.target_layer(),
        neurons: docs
            .iter()
            .map(|d| IndexEntry {
                neuron: d.neuron,
                path: neuron_doc_path(d.neuron),
                top_tokens: d.profile.iter().take(3).map(|t| t.t.clone()).collect(),
                precursors: d.precursors.len(),
                targets: d.targets.len(),
            })
            .collect(),
    };
    write(&dir.join("index.json"), &to_json_line(&index)?)?;
    write(&dir.join("summary.json"), &to_json_line(&analysis.report)?)?;

    Ok(BundleSummary { documents: docs.len(), hash: bundle_hash(dir)? })
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap_or(&path);
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            out.push((key, path));
        }
    }
    Ok(())
}

/// SHA-256 over every file in `dir`, in sorted relative-path order, hashing
/// each path and its length-prefixed contents.
pub fn bundle_hash(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (key, path) in files {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(key.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}
