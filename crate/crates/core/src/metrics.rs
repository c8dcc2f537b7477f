//! Confluence, activational dispersion and categorical distancing.
//!
//! All cosines are measured on the embedding table. Sums are taken over
//! values sorted by magnitude order, so every metric is bit-for-bit invariant
//! under reordering of its input sets and `confluence_m(x, y) ==
//! confluence_m(y, x)` holds exactly.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingTable;
use crate::error::{Error, Result};
use crate::extraction::CoreTokenSet;

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::domain(format!(
            "cosine of vectors with dimensions {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::domain("cosine of a zero vector"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Unit-normalized embeddings of a sorted, de-duplicated token set.
pub(crate) struct UnitRows {
    dim: usize,
    ids: Vec<u32>,
    data: Vec<f64>,
}

impl UnitRows {
    pub(crate) fn gather<'a, I>(emb: &EmbeddingTable, ids: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a u32>,
    {
        let ids: Vec<u32> = ids.into_iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let mut data = Vec::with_capacity(ids.len() * emb.dim());
        for &id in &ids {
            emb.push_unit(id, &mut data)?;
        }
        Ok(Self {
            dim: emb.dim(),
            ids,
            data,
        })
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn cos(&self, i: usize, other: &UnitRows, j: usize) -> f64 {
        self.row(i)
            .iter()
            .zip(other.row(j))
            .map(|(a, b)| a * b)
            .sum::<f64>()
            .clamp(-1.0, 1.0)
    }

    /// Cosines of all cross pairs whose two token ids differ.
    fn cross_cosines(&self, other: &UnitRows) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * other.len());
        for i in 0..self.len() {
            for j in 0..other.len() {
                if self.ids[i] != other.ids[j] {
                    out.push(self.cos(i, other, j));
                }
            }
        }
        out
    }

    /// Cosines of all unordered pairs of distinct members.
    fn within_cosines(&self) -> Vec<f64> {
        let n = self.len();
        let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push(self.cos(i, self, j));
            }
        }
        out
    }
}

/// Order-independent sum: values are sorted before a compensated summation.
pub(crate) fn stable_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values.iter() {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub(crate) fn stable_mean(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(stable_sum(values) / values.len() as f64)
    }
}

/// Mean cross-cluster cosine and the number of pairs it averages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confluence {
    pub m: f64,
    pub pair_count: usize,
}

/// Mean cosine over all cross pairs of the two sets, skipping pairs whose
/// token ids are equal. `None` when no pair remains.
pub fn confluence_m<'a, X, Y>(x: X, y: Y, emb: &EmbeddingTable) -> Result<Option<Confluence>>
where
    X: IntoIterator<Item = &'a u32>,
    Y: IntoIterator<Item = &'a u32>,
{
    let xr = UnitRows::gather(emb, x)?;
    let yr = UnitRows::gather(emb, y)?;
    let mut values = xr.cross_cosines(&yr);
    let pair_count = values.len();
    Ok(stable_mean(&mut values).map(|m| Confluence { m, pair_count }))
}

/// Type-7 quantile: linear interpolation between order statistics at
/// 1-based rank `1 + (n - 1) q`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::domain("quantile of an empty list"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::domain(format!("quantile level {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, q))
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn pairwise_abs_diffs(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push((values[i] - values[j]).abs());
        }
    }
    out
}

/// Activational dispersion of a taken set: mean absolute activation gap over
/// unordered taken pairs minus the first quartile of the same gaps over all
/// unordered core pairs. Activations are read through `activations_of`, so
/// the same core can be measured on either neuron's activation view.
pub fn dispersion_d<'a, T, F>(taken: T, core: &CoreTokenSet, activations_of: F) -> Result<f64>
where
    T: IntoIterator<Item = &'a u32>,
    F: Fn(u32) -> Option<f64>,
{
    if core.len() < 2 {
        return Err(Error::domain(format!(
            "dispersion needs >= 2 core tokens, neuron {} has {}",
            core.neuron,
            core.len()
        )));
    }
    let core_ids = core.ids();
    let taken: BTreeSet<u32> = taken.into_iter().copied().collect();
    if taken.len() < 2 {
        return Err(Error::domain("dispersion needs >= 2 taken tokens"));
    }
    if let Some(stray) = taken.iter().find(|id| !core_ids.contains(id)) {
        return Err(Error::domain(format!(
            "taken token {stray} is not a core token of neuron {}",
            core.neuron
        )));
    }
    let lookup = |id: u32| {
        activations_of(id).ok_or_else(|| Error::domain(format!("no activation for token {id}")))
    };
    let core_acts = core_ids.iter().map(|&id| lookup(id)).collect::<Result<Vec<_>>>()?;
    let taken_acts = taken.iter().map(|&id| lookup(id)).collect::<Result<Vec<_>>>()?;

    let mut taken_gaps = pairwise_abs_diffs(&taken_acts);
    let mean = stable_mean(&mut taken_gaps).expect("at least one taken pair");
    let mut core_gaps = pairwise_abs_diffs(&core_acts);
    core_gaps.sort_by(f64::total_cmp);
    Ok(mean - quantile_sorted(&core_gaps, 0.25))
}

/// The two cosine populations behind categorical distancing: cross pairs
/// between `x` and `y` (equal ids skipped) and unordered pairs within `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistancingPopulations {
    pub cross: Vec<f64>,
    pub within: Vec<f64>,
}

pub fn distancing_populations<'a, X, Y>(
    x: X,
    y: Y,
    emb: &EmbeddingTable,
) -> Result<DistancingPopulations>
where
    X: IntoIterator<Item = &'a u32>,
    Y: IntoIterator<Item = &'a u32>,
{
    let xr = UnitRows::gather(emb, x)?;
    let yr = UnitRows::gather(emb, y)?;
    Ok(DistancingPopulations {
        cross: xr.cross_cosines(&yr),
        within: xr.within_cosines(),
    })
}

impl DistancingPopulations {
    /// Cross mean minus within-`x` mean; `None` if either population is empty.
    pub fn d(&self) -> Option<f64> {
        let cross = stable_mean(&mut self.cross.clone())?;
        let within = stable_mean(&mut self.within.clone())?;
        Some(cross - within)
    }
}

/// Categorical distancing `mean cos(x, y) - mean cos(x)`. `None` when either
/// term has no valid pair.
pub fn distancing_d<'a, X, Y>(x: X, y: Y, emb: &EmbeddingTable) -> Result<Option<f64>>
where
    X: IntoIterator<Item = &'a u32>,
    Y: IntoIterator<Item = &'a u32>,
{
    Ok(distancing_populations(x, y, emb)?.d())
}

/// Shared-token count and the relative index `n - |x| / 10`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommonTokens {
    pub n: usize,
    pub d_prime: f64,
}

pub fn common_token_index<'a, X, Y>(x: X, y: Y) -> Result<CommonTokens>
where
    X: IntoIterator<Item = &'a u32>,
    Y: IntoIterator<Item = &'a u32>,
{
    let x: BTreeSet<u32> = x.into_iter().copied().collect();
    if x.is_empty() {
        return Err(Error::domain("common-token index of an empty cluster"));
    }
    let y: BTreeSet<u32> = y.into_iter().copied().collect();
    let n = x.intersection(&y).count();
    Ok(CommonTokens {
        n,
        d_prime: n as f64 - x.len() as f64 / 10.0,
    })
}
