//! Two-layer synthetic datasets with planted priming, attention and phasing.
//!
//! The vocabulary is split into groups of `group_size` tokens; each group has
//! a random unit direction and its tokens embed near it. Layer-0 neurons are
//! organised in families of `precursor_fanin` members. Every neuron responds
//! to `groups_per_neuron` groups whose levels decay with `priming_sharpness`.
//! With phasing, each family shares one group that replaces every member's
//! weakest group at level `phasing_strength`. Each target draws one family as
//! its designated precursors, whose weights are raised by
//! `attention_contrast`. Target activations are the exact aggregation of the
//! stored weights and layer-0 activations.
//!
//! Every random draw happens regardless of the strength values, so changing a
//! strength never perturbs the rest of the dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    assemble_dataset, ActivationProfile, EmbeddingTable, LayerWeights, ModelDataset, NeuronRef, ProfileMap,
    TokenEntry,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub layer0_size: usize,
    pub layer1_size: usize,
    pub embedding_dim: usize,
    pub precursor_fanin: usize,
    pub phasing_strength: f64,
    pub attention_contrast: f64,
    pub priming_sharpness: f64,
    /// Spread of token embeddings around their group direction.
    pub noise_scale: f64,
    /// Lognormal sigma applied to every layer-0 activation.
    pub activation_noise: f64,
    /// Extra independent lognormal sigma on phased (shared-group) tokens.
    pub phasing_noise: f64,
    pub group_size: usize,
    pub groups_per_neuron: usize,
    /// Number of tokens kept in each layer-1 profile.
    pub profile_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_size: 2000,
            layer0_size: 64,
            layer1_size: 64,
            embedding_dim: 64,
            precursor_fanin: 4,
            phasing_strength: 1.0,
            attention_contrast: 2.0,
            priming_sharpness: 1.0,
            noise_scale: 0.3,
            activation_noise: 0.1,
            phasing_noise: 0.0,
            group_size: 20,
            groups_per_neuron: 5,
            profile_size: 100,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("layer0_size", self.layer0_size),
            ("layer1_size", self.layer1_size),
            ("embedding_dim", self.embedding_dim),
            ("precursor_fanin", self.precursor_fanin),
            ("group_size", self.group_size),
            ("groups_per_neuron", self.groups_per_neuron),
            ("profile_size", self.profile_size),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation(format!("synth config: {name} must be >= 1")));
        }
        let strengths = [
            ("phasing_strength", self.phasing_strength),
            ("attention_contrast", self.attention_contrast),
            ("priming_sharpness", self.priming_sharpness),
            ("noise_scale", self.noise_scale),
            ("activation_noise", self.activation_noise),
            ("phasing_noise", self.phasing_noise),
        ];
        if let Some((name, v)) = strengths.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation(format!("synth config: {name} = {v} must be finite and >= 0")));
        }
        if self.precursor_fanin > self.layer0_size {
            return Err(Error::Validation("synth config: precursor_fanin exceeds layer0_size".into()));
        }
        let groups = self.vocab_size / self.group_size;
        if groups < self.groups_per_neuron + 1 {
            return Err(Error::Validation(format!(
                "synth config: {groups} token groups cannot supply {} own groups plus a shared one",
                self.groups_per_neuron
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::Validation("synth config: vocab_size exceeds u32".into()));
        }
        Ok(())
    }

    fn group_count(&self) -> usize {
        self.vocab_size / self.group_size
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedGroup {
    pub group: usize,
    pub token_ids: Vec<u32>,
    /// The family-wide phased group.
    pub shared: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntendedTaken {
    pub precursor: NeuronRef,
    pub target: NeuronRef,
    pub token_ids: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub planted: BTreeMap<NeuronRef, Vec<PlantedGroup>>,
    /// Designated precursors of each target.
    pub designated: BTreeMap<NeuronRef, Vec<NeuronRef>>,
    /// Shared group expected in the taken set of every designated pair.
    /// Empty when phasing is off.
    pub intended_taken: Vec<IntendedTaken>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TruthLine<'a> {
    Planted { layer: u32, neuron: u32, groups: &'a [PlantedGroup] },
    Designated { layer: u32, neuron: u32, precursors: Vec<u32> },
    IntendedTaken { precursor: u32, target: u32, ids: Vec<u32> },
}

impl GroundTruth {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let mut line = |rec: TruthLine| -> Result<()> {
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io("<ground truth>", e))
        };
        for (n, groups) in &self.planted {
            line(TruthLine::Planted { layer: n.layer, neuron: n.index, groups })?;
        }
        for (t, ps) in &self.designated {
            line(TruthLine::Designated {
                layer: t.layer,
                neuron: t.index,
                precursors: ps.iter().map(|p| p.index).collect(),
            })?;
        }
        for it in &self.intended_taken {
            line(TruthLine::IntendedTaken {
                precursor: it.precursor.index,
                target: it.target.index,
                ids: it.token_ids.iter().copied().collect(),
            })?;
        }
        Ok(())
    }
}

/// `Σ wᵢ·xᵢ + b`, accumulated in f64 in index order.
pub fn forward_aggregate(weights: &[f32], activations: &[f64], bias: f32) -> Result<f64> {
    if weights.len() != activations.len() {
        return Err(Error::domain(format!(
            "aggregation over {} weights and {} activations",
            weights.len(),
            activations.len()
        )));
    }
    let sum: f64 = weights.iter().zip(activations).map(|(&w, &x)| f64::from(w) * x).sum();
    Ok(sum + f64::from(bias))
}

fn surface_of(cfg: &SynthConfig, id: usize) -> String {
    let g = id / cfg.group_size;
    if g < cfg.group_count() {
        format!(" g{g:03}_{:02}", id % cfg.group_size)
    } else {
        format!(" f{id}")
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn embeddings(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<EmbeddingTable> {
    let dim = cfg.embedding_dim;
    let directions: Vec<Vec<f64>> = (0..cfg.group_count()).map(|_| unit(gaussian_vec(rng, dim))).collect();
    let scale = cfg.noise_scale / (dim as f64).sqrt();
    let mut rows = Vec::with_capacity(cfg.vocab_size * dim);
    for id in 0..cfg.vocab_size {
        let noise = gaussian_vec(rng, dim);
        let row: Vec<f64> = match directions.get(id / cfg.group_size) {
            Some(d) => d.iter().zip(&noise).map(|(a, z)| a + scale * z).collect(),
            None => unit(noise),
        };
        // Guard the measure-zero case of an all-zero row.
        let row = if row.iter().all(|&x| x as f32 == 0.0) { vec![1.0; dim] } else { row };
        rows.extend(row.into_iter().map(|x| x as f32));
    }
    let surfaces = (0..cfg.vocab_size).map(|id| surface_of(cfg, id)).collect();
    EmbeddingTable::new(dim, rows)?.with_surfaces(surfaces)
}

fn group_tokens(cfg: &SynthConfig, g: usize) -> Vec<u32> {
    ((g * cfg.group_size) as u32..((g + 1) * cfg.group_size) as u32).collect()
}

/// Deterministic dataset and ground truth for `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<(ModelDataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let emb = embeddings(cfg, &mut rng)?;
    let groups = cfg.group_count();
    let gpn = cfg.groups_per_neuron;
    let families = cfg.layer0_size.div_ceil(cfg.precursor_fanin);
    let shared: Vec<usize> = (0..families).map(|_| rng.random_range(0..groups)).collect();
    let phased = cfg.phasing_strength > 0.0;

    // Layer 0.
    let mut x0: Vec<BTreeMap<u32, f64>> = Vec::with_capacity(cfg.layer0_size);
    let mut planted = BTreeMap::new();
    for i in 0..cfg.layer0_size {
        let family = i / cfg.precursor_fanin;
        let mut pool: Vec<usize> = (0..groups).filter(|&g| g != shared[family]).collect();
        pool.shuffle(&mut rng);
        let own = &pool[..gpn];
        let mut acts = BTreeMap::new();
        let mut planted_here = Vec::with_capacity(gpn);
        for (r, &g) in own.iter().enumerate() {
            let level = if gpn > 1 {
                (-cfg.priming_sharpness * r as f64 / (gpn - 1) as f64).exp()
            } else {
                1.0
            };
            let is_shared = phased && r == gpn - 1;
            let (group, level) = if is_shared { (shared[family], cfg.phasing_strength) } else { (g, level) };
            for id in group_tokens(cfg, group) {
                let z: f64 = StandardNormal.sample(&mut rng);
                let zp: f64 = StandardNormal.sample(&mut rng);
                let sigma_extra = if is_shared { cfg.phasing_noise * zp } else { 0.0 };
                let a = level * (cfg.activation_noise * z + sigma_extra).exp();
                acts.insert(id, a.max(f64::MIN_POSITIVE));
            }
            planted_here.push(PlantedGroup { group, token_ids: group_tokens(cfg, group), shared: is_shared });
        }
        planted.insert(NeuronRef::new(0, i as u32), planted_here);
        x0.push(acts);
    }

    // Weights.
    let noise_w = Normal::new(0.0, 0.05).expect("valid sigma");
    let noise_b = Normal::new(0.0, 0.01).expect("valid sigma");
    let lift = Uniform::new(0.5, 1.5).expect("valid range");
    let mut matrix = Vec::with_capacity(cfg.layer1_size * cfg.layer0_size);
    let mut bias = Vec::with_capacity(cfg.layer1_size);
    let mut designated = BTreeMap::new();
    let mut intended_taken = Vec::new();
    for j in 0..cfg.layer1_size {
        let family = rng.random_range(0..families);
        let members: Vec<usize> =
            (family * cfg.precursor_fanin..((family + 1) * cfg.precursor_fanin).min(cfg.layer0_size)).collect();
        for i in 0..cfg.layer0_size {
            let base: f64 = noise_w.sample(&mut rng);
            let up: f64 = lift.sample(&mut rng);
            let w = if members.contains(&i) { base + cfg.attention_contrast * up } else { base };
            matrix.push(w as f32);
        }
        bias.push(noise_b.sample(&mut rng) as f32);
        let target = NeuronRef::new(1, j as u32);
        designated.insert(target, members.iter().map(|&i| NeuronRef::new(0, i as u32)).collect());
        if phased {
            for &i in &members {
                intended_taken.push(IntendedTaken {
                    precursor: NeuronRef::new(0, i as u32),
                    target,
                    token_ids: group_tokens(cfg, shared[family]).into_iter().collect(),
                });
            }
        }
    }
    let weights = LayerWeights::new(0, cfg.layer1_size, cfg.layer0_size, matrix, bias)?;

    // Layer 1: aggregate every token through the stored weights, keep the top.
    let mut profiles = ProfileMap::new();
    for (i, acts) in x0.iter().enumerate() {
        let n = NeuronRef::new(0, i as u32);
        let entries = acts
            .iter()
            .map(|(&id, &a)| TokenEntry { token_id: id, surface: surface_of(cfg, id as usize), activation: a })
            .collect();
        profiles.insert(n, ActivationProfile::new(n, entries)?);
    }
    let mut x = vec![0.0; cfg.layer0_size];
    let mut per_target: Vec<Vec<(u32, f64)>> = vec![Vec::with_capacity(cfg.vocab_size); cfg.layer1_size];
    for id in 0..cfg.vocab_size as u32 {
        for (xi, acts) in x.iter_mut().zip(&x0) {
            *xi = acts.get(&id).copied().unwrap_or(0.0);
        }
        for (j, out) in per_target.iter_mut().enumerate() {
            out.push((id, forward_aggregate(weights.row(j), &x, weights.bias(j))?));
        }
    }
    for (j, mut acts) in per_target.into_iter().enumerate() {
        acts.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        acts.truncate(cfg.profile_size);
        let n = NeuronRef::new(1, j as u32);
        let entries = acts
            .into_iter()
            .map(|(id, a)| TokenEntry { token_id: id, surface: surface_of(cfg, id as usize), activation: a })
            .collect::<Vec<_>>();
        if entries.is_empty() {
            return Err(Error::Validation(format!("synthetic profile of {n} is empty")));
        }
        profiles.insert(n, ActivationProfile::new(n, entries)?);
    }

    let dataset = assemble_dataset(profiles, weights, emb, format!("synthetic seed={}", cfg.seed))?;
    Ok((dataset, GroundTruth { planted, designated, intended_taken }))
}

/// Writes the dataset in the ingest formats plus `ground_truth.jsonl`.
pub fn write_synthetic(dataset: &ModelDataset, truth: &GroundTruth, dir: &Path) -> Result<()> {
    dataset.write_to_dir(dir)?;
    let path = dir.join("ground_truth.jsonl");
    let mut buf = Vec::new();
    truth.write_jsonl(&mut buf)?;
    std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))
}

/// Recomputes every stored layer-1 activation from the stored weights and
/// layer-0 profiles; returns the number of mismatching entries.
pub fn reconstruction_mismatches(dataset: &ModelDataset) -> Result<usize> {
    let w = dataset.weights();
    let source: Vec<Option<&ActivationProfile>> =
        (0..w.source_size() as u32).map(|i| dataset.profile(NeuronRef::new(w.source_layer(), i))).collect();
    let mut bad = 0;
    let mut x = vec![0.0; w.source_size()];
    for target in dataset.targets() {
        let Some(profile) = dataset.profile(target) else { continue };
        for e in profile.entries() {
            for (xi, p) in x.iter_mut().zip(&source) {
                *xi = p.and_then(|p| p.activation_of(e.token_id)).unwrap_or(0.0);
            }
            let a = forward_aggregate(w.row(target.index as usize), &x, w.bias(target.index as usize))?;
            if a.to_bits() != e.activation.to_bits() {
                bad += 1;
            }
        }
    }
    Ok(bad)
}
