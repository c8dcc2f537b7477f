//! Core tokens, strongest precursors and taken/left partitions.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::dataset::{ActivationProfile, LayerWeights, ModelDataset, NeuronRef, TokenEntry};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

pub const DEFAULT_CORE_SIZE: usize = 100;
pub const DEFAULT_MAX_PRECURSORS: usize = 10;

/// The `k` highest-activation tokens of a neuron.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoreTokenSet {
    pub neuron: NeuronRef,
    pub tokens: Vec<TokenEntry>,
    /// Set when the profile held fewer than `k` tokens.
    pub short: bool,
}

impl CoreTokenSet {
    pub fn empty(neuron: NeuronRef) -> Self {
        Self {
            neuron,
            tokens: Vec::new(),
            short: true,
        }
    }

    pub fn ids(&self) -> BTreeSet<u32> {
        self.tokens.iter().map(|t| t.token_id).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn activation_of(&self, token_id: u32) -> Option<f64> {
        self.tokens
            .iter()
            .find(|t| t.token_id == token_id)
            .map(|t| t.activation)
    }
}

/// Top `k` entries of a profile. Profiles are already ordered by descending
/// activation with ascending token id on ties, so the boundary tie rule
/// falls out of the ordering.
pub fn core_tokens(profile: &ActivationProfile, k: usize) -> Result<CoreTokenSet> {
    if k == 0 {
        return Err(Error::domain("core size k must be >= 1"));
    }
    let entries = profile.entries();
    Ok(CoreTokenSet {
        neuron: profile.neuron(),
        tokens: entries.iter().take(k).cloned().collect(),
        short: entries.len() < k,
    })
}

/// Up to `m` source neurons with the largest strictly positive weights into
/// a target neuron.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrecursorSet {
    pub target: NeuronRef,
    pub precursors: Vec<(NeuronRef, f64)>,
}

impl PrecursorSet {
    pub fn is_empty(&self) -> bool {
        self.precursors.is_empty()
    }

    pub fn len(&self) -> usize {
        self.precursors.len()
    }
}

pub fn top_precursors(weights: &LayerWeights, target: NeuronRef, m: usize) -> Result<PrecursorSet> {
    if m == 0 {
        return Err(Error::domain("precursor cap m must be >= 1"));
    }
    if target.layer != weights.target_layer() || target.index as usize >= weights.target_size() {
        return Err(Error::domain(format!(
            "neuron {target} is not in target layer {} of size {}",
            weights.target_layer(),
            weights.target_size()
        )));
    }
    let mut positive: Vec<(u32, f32)> = weights
        .row(target.index as usize)
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(j, &w)| (j as u32, w))
        .collect();
    positive.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    positive.truncate(m);
    let source = weights.source_layer();
    Ok(PrecursorSet {
        target,
        precursors: positive
            .into_iter()
            .map(|(j, w)| (NeuronRef::new(source, j), f64::from(w)))
            .collect(),
    })
}

/// Split of a precursor's core tokens into those the target also holds
/// (taken) and the rest (left).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TakenPartition {
    pub precursor: NeuronRef,
    pub target: NeuronRef,
    pub taken: BTreeSet<u32>,
    pub left: BTreeSet<u32>,
}

pub fn taken_partition(precursor_core: &CoreTokenSet, target_core: &CoreTokenSet) -> TakenPartition {
    let target_ids = target_core.ids();
    let (taken, left) = precursor_core
        .tokens
        .iter()
        .map(|t| t.token_id)
        .partition(|id| target_ids.contains(id));
    TakenPartition {
        precursor: precursor_core.neuron,
        target: target_core.neuron,
        taken,
        left,
    }
}

/// Core token sets of every profiled neuron.
#[derive(Debug, Clone)]
pub struct CoreIndex {
    cores: BTreeMap<NeuronRef, CoreTokenSet>,
}

impl CoreIndex {
    pub fn build(dataset: &ModelDataset, k: usize, exec: Execution) -> Result<Self> {
        let profiles: Vec<&ActivationProfile> = dataset.profiles().values().collect();
        let cores = par::try_map_ordered(exec, &profiles, |p| core_tokens(p, k))?;
        Ok(Self {
            cores: cores.into_iter().map(|c| (c.neuron, c)).collect(),
        })
    }

    /// Core set of `neuron`; neurons without a profile have an empty core.
    pub fn get(&self, neuron: NeuronRef) -> std::borrow::Cow<'_, CoreTokenSet> {
        match self.cores.get(&neuron) {
            Some(c) => std::borrow::Cow::Borrowed(c),
            None => std::borrow::Cow::Owned(CoreTokenSet::empty(neuron)),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &CoreTokenSet> {
        self.cores.values()
    }
}

/// One (target, retained precursor) pair with its taken/left split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairEntry {
    pub target: NeuronRef,
    pub precursor: NeuronRef,
    /// 0-based position among the target's precursors.
    pub rank: usize,
    pub weight: f64,
    pub partition: TakenPartition,
}

/// All taken partitions, in target index order then precursor rank.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairEnumeration {
    pub entries: Vec<PairEntry>,
    /// Targets with no positive-weight precursor.
    pub skipped_targets: usize,
}

impl PairEnumeration {
    /// Entries grouped by target, preserving order.
    pub fn by_target(&self) -> Vec<&[PairEntry]> {
        self.entries
            .chunk_by(|a, b| a.target == b.target)
            .collect()
    }
}

pub fn enumerate_pairs(
    dataset: &ModelDataset,
    cores: &CoreIndex,
    m: usize,
    exec: Execution,
) -> Result<PairEnumeration> {
    let targets: Vec<NeuronRef> = dataset.targets().collect();
    let per_target = par::try_map_ordered(exec, &targets, |&target| {
        let precursors = top_precursors(dataset.weights(), target, m)?;
        let target_core = cores.get(target);
        Ok::<_, Error>(
            precursors
                .precursors
                .iter()
                .enumerate()
                .map(|(rank, &(precursor, weight))| PairEntry {
                    target,
                    precursor,
                    rank,
                    weight,
                    partition: taken_partition(&cores.get(precursor), &target_core),
                })
                .collect::<Vec<_>>(),
        )
    })?;
    let skipped_targets = per_target.iter().filter(|v| v.is_empty()).count();
    if skipped_targets > 0 {
        log::info!("{skipped_targets} target neuron(s) have no positive-weight precursor; skipped");
    }
    Ok(PairEnumeration {
        entries: per_target.into_iter().flatten().collect(),
        skipped_targets,
    })
}
