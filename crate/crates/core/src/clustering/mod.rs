//! Per-neuron categorical clusters over core tokens.
//!
//! The deterministic method is spherical k-means on unit-normalized
//! embeddings. An optional LLM labeler (see [`labeler`]) only renames
//! clusters; it never changes membership.

pub mod labeler;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingTable, NeuronRef};
use crate::error::{Error, Result};
use crate::extraction::{CoreIndex, CoreTokenSet};
use crate::par::{self, Execution};

pub const DEFAULT_CLUSTERS: usize = 5;
pub const DEFAULT_MIN_CLUSTER: usize = 6;
pub const MAX_ITERATIONS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    #[default]
    Deterministic,
    Llm,
}

impl std::fmt::Display for ClusterMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Deterministic => "deterministic",
            Self::Llm => "llm",
        })
    }
}

impl std::str::FromStr for ClusterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(Self::Deterministic),
            "llm" => Ok(Self::Llm),
            other => Err(Error::Validation(format!(
                "unknown clustering method '{other}' (expected deterministic or llm)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub label: String,
    pub token_ids: BTreeSet<u32>,
    /// Arithmetic mean of the members' raw embeddings.
    pub centroid: Vec<f64>,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPartition {
    pub neuron: NeuronRef,
    pub clusters: Vec<Cluster>,
    pub method: ClusterMethod,
    /// Seed of the deterministic method.
    pub seed: Option<u64>,
    /// Set when the core held fewer tokens than requested clusters.
    pub short: bool,
}

impl ClusterPartition {
    pub fn token_ids(&self) -> BTreeSet<u32> {
        self.clusters.iter().flat_map(|c| c.token_ids.iter().copied()).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn raw_centroid(emb: &EmbeddingTable, ids: &BTreeSet<u32>) -> Result<Vec<f64>> {
    let mut c = vec![0.0; emb.dim()];
    for &id in ids {
        for (acc, &v) in c.iter_mut().zip(emb.get(id)?) {
            *acc += f64::from(v);
        }
    }
    let n = ids.len() as f64;
    c.iter_mut().for_each(|x| *x /= n);
    Ok(c)
}

fn finish(
    neuron: NeuronRef,
    emb: &EmbeddingTable,
    mut groups: Vec<BTreeSet<u32>>,
    seed: u64,
    short: bool,
) -> Result<ClusterPartition> {
    groups.retain(|g| !g.is_empty());
    groups.sort_by_key(|g| *g.first().expect("non-empty"));
    let clusters = groups
        .into_iter()
        .enumerate()
        .map(|(i, token_ids)| {
            Ok(Cluster {
                label: format!("cluster-{i}"),
                centroid: raw_centroid(emb, &token_ids)?,
                token_ids,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClusterPartition {
        neuron,
        clusters,
        method: ClusterMethod::Deterministic,
        seed: Some(seed),
        short,
    })
}

/// Spherical k-means with seeded farthest-point initialization.
///
/// The first center is drawn from `seed`; each further center is the point
/// with the lowest best-cosine to the centers chosen so far. At most
/// [`MAX_ITERATIONS`] assignment rounds are run. A cluster that empties is
/// refilled with the point farthest from its own centroid. Clusters are
/// ordered by smallest member id and labelled `cluster-<i>`.
pub fn cluster_deterministic(
    core: &CoreTokenSet,
    emb: &EmbeddingTable,
    c: usize,
    seed: u64,
) -> Result<ClusterPartition> {
    if c == 0 {
        return Err(Error::domain("cluster count must be >= 1"));
    }
    let ids: Vec<u32> = core.ids().into_iter().collect();
    if ids.is_empty() {
        return Err(Error::domain(format!("neuron {} has no core tokens to cluster", core.neuron)));
    }
    let n = ids.len();
    if n < c {
        let singletons = ids.iter().map(|&id| BTreeSet::from([id])).collect();
        return finish(core.neuron, emb, singletons, seed, true);
    }

    let units: Vec<Vec<f64>> = ids.iter().map(|&id| emb.unit(id)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![units[rng.random_range(0..n)].clone()];
    let mut best_sim: Vec<f64> = units.iter().map(|u| dot(u, &centers[0])).collect();
    while centers.len() < c {
        let next = argmax(best_sim.iter().map(|s| -s));
        centers.push(units[next].clone());
        for (s, u) in best_sim.iter_mut().zip(&units) {
            *s = s.max(dot(u, &units[next]));
        }
    }

    let mut assign: Vec<usize> = vec![usize::MAX; n];
    for _ in 0..MAX_ITERATIONS {
        let mut next: Vec<usize> =
            units.iter().map(|u| argmax(centers.iter().map(|ctr| dot(u, ctr)))).collect();
        // Refill empty clusters one at a time from the worst-fitting point of
        // a cluster that can spare it.
        loop {
            let mut sizes = vec![0usize; c];
            next.iter().for_each(|&a| sizes[a] += 1);
            let Some(empty) = sizes.iter().position(|&s| s == 0) else { break };
            let donor = argmax((0..n).map(|i| {
                if sizes[next[i]] > 1 {
                    -dot(&units[i], &centers[next[i]])
                } else {
                    f64::NEG_INFINITY
                }
            }));
            next[donor] = empty;
            centers[empty] = units[donor].clone();
        }
        if next == assign {
            break;
        }
        assign = next;
        for (k, center) in centers.iter_mut().enumerate() {
            let mut sum = vec![0.0; emb.dim()];
            for (u, _) in units.iter().zip(&assign).filter(|(_, &a)| a == k) {
                sum.iter_mut().zip(u).for_each(|(s, v)| *s += v);
            }
            normalize(&mut sum);
            *center = sum;
        }
    }

    let mut groups = vec![BTreeSet::new(); c];
    for (&id, &a) in ids.iter().zip(&assign) {
        groups[a].insert(id);
    }
    finish(core.neuron, emb, groups, seed, false)
}

/// Deterministic partitions for every neuron with a non-empty core.
pub fn cluster_all(
    cores: &CoreIndex,
    emb: &EmbeddingTable,
    c: usize,
    seed: u64,
    exec: Execution,
) -> Result<BTreeMap<NeuronRef, ClusterPartition>> {
    let nonempty: Vec<&CoreTokenSet> = cores.iter().filter(|c| !c.is_empty()).collect();
    let parts = par::try_map_ordered(exec, &nonempty, |core| cluster_deterministic(core, emb, c, seed))?;
    Ok(parts.into_iter().map(|p| (p.neuron, p)).collect())
}

/// Clusters with at least `minimum` tokens, in their original order.
pub fn filter_min_cardinality(clusters: &[Cluster], minimum: usize) -> Vec<&Cluster> {
    clusters.iter().filter(|c| c.len() >= minimum.max(1)).collect()
}

#[derive(Serialize, Deserialize)]
struct ExportCluster {
    label: String,
    ids: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct ExportPartition {
    layer: u32,
    neuron: u32,
    method: ClusterMethod,
    clusters: Vec<ExportCluster>,
}

/// One JSONL line per partition:
/// `{"layer","neuron","method","clusters":[{"label","ids"}]}`.
pub fn encode_partitions<'a, W: Write>(
    mut w: W,
    partitions: impl IntoIterator<Item = &'a ClusterPartition>,
) -> Result<()> {
    for p in partitions {
        let rec = ExportPartition {
            layer: p.neuron.layer,
            neuron: p.neuron.index,
            method: p.method,
            clusters: p
                .clusters
                .iter()
                .map(|c| ExportCluster {
                    label: c.label.clone(),
                    ids: c.token_ids.iter().copied().collect(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io("<partitions>", e))?;
    }
    Ok(())
}

pub fn write_partitions<'a>(
    path: &Path,
    partitions: impl IntoIterator<Item = &'a ClusterPartition>,
) -> Result<()> {
    let mut buf = Vec::new();
    encode_partitions(&mut buf, partitions)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ActivationProfile, TokenEntry};
    use crate::extraction::core_tokens;
    use proptest::prelude::*;

    fn core(ids: &[u32]) -> CoreTokenSet {
        let entries = ids
            .iter()
            .map(|&id| TokenEntry { token_id: id, surface: String::new(), activation: 1.0 })
            .collect();
        core_tokens(&ActivationProfile::new(NeuronRef::new(0, 0), entries).unwrap(), 100).unwrap()
    }

    fn cluster(size: usize) -> Cluster {
        Cluster { label: String::new(), token_ids: (0..size as u32).collect(), centroid: vec![] }
    }

    #[test]
    fn separable_case_any_seed() {
        let emb = EmbeddingTable::new(2, vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.1, 0.1, 3.0]).unwrap();
        for seed in 0..10 {
            let p = cluster_deterministic(&core(&[0, 1, 2, 3]), &emb, 2, seed).unwrap();
            let sets: Vec<Vec<u32>> =
                p.clusters.iter().map(|c| c.token_ids.iter().copied().collect()).collect();
            assert_eq!(sets, vec![vec![0, 2], vec![1, 3]]);
            assert!(!p.short);
            assert_eq!(p.clusters[0].centroid, vec![1.5, 0.05000000074505806]);
        }
    }

    #[test]
    fn fewer_tokens_than_clusters() {
        let emb = EmbeddingTable::new(2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let p = cluster_deterministic(&core(&[0, 1, 2]), &emb, 5, 7).unwrap();
        assert_eq!(p.clusters.len(), 3);
        assert!(p.short);
        assert!(p.clusters.iter().all(|c| c.len() == 1));
        assert_eq!(p.clusters[2].label, "cluster-2");
    }

    #[test]
    fn empty_core_or_zero_clusters_rejected() {
        let emb = EmbeddingTable::new(2, vec![1.0, 0.0]).unwrap();
        assert!(cluster_deterministic(&CoreTokenSet::empty(NeuronRef::new(0, 0)), &emb, 5, 0).is_err());
        assert!(cluster_deterministic(&core(&[0]), &emb, 0, 0).is_err());
    }

    #[test]
    fn filter_keeps_order() {
        let cs = vec![cluster(7), cluster(6), cluster(5), cluster(2)];
        let kept: Vec<usize> = filter_min_cardinality(&cs, 6).iter().map(|c| c.len()).collect();
        assert_eq!(kept, vec![7, 6]);
        assert!(filter_min_cardinality(&cs, 8).is_empty());
        assert_eq!(filter_min_cardinality(&cs, 1).len(), 4);
    }

    #[test]
    fn export_format() {
        let emb = EmbeddingTable::new(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = cluster_deterministic(&core(&[0, 1]), &emb, 2, 0).unwrap();
        let mut buf = Vec::new();
        encode_partitions(&mut buf, [&p]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"layer\":0,\"neuron\":0,\"method\":\"deterministic\",\"clusters\":[{\"label\":\"cluster-0\",\"ids\":[0]},{\"label\":\"cluster-1\",\"ids\":[1]}]}\n"
        );
    }

    fn random_table(seed: u64, vocab: usize, dim: usize) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..vocab * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        EmbeddingTable::new(dim, rows).unwrap()
    }

    proptest! {
        #[test]
        fn partition_law_and_determinism(
            seed in 0u64..1000,
            ids in proptest::collection::btree_set(0u32..60, 1..40),
            c in 1usize..8,
        ) {
            let emb = random_table(seed, 60, 6);
            let ids: Vec<u32> = ids.into_iter().collect();
            let core = core(&ids);
            let p = cluster_deterministic(&core, &emb, c, seed).unwrap();
            let q = cluster_deterministic(&core, &emb, c, seed).unwrap();
            prop_assert_eq!(&p, &q);
            let total: usize = p.clusters.iter().map(Cluster::len).sum();
            prop_assert_eq!(total, ids.len());
            prop_assert_eq!(p.token_ids(), core.ids());
            prop_assert_eq!(p.clusters.len(), c.min(ids.len()));
            prop_assert!(p.clusters.iter().all(|c| !c.is_empty()));
        }
    }
}
