//! End-to-end analysis: pairs, clusters, metric records and table summaries.
//!
//! Work is split per target neuron and merged in target order, so reports
//! are identical for any worker count.

mod bundle;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use bundle::{
    bundle_hash, export_viewer_bundle, neuron_doc_path, BundleSummary, ClusterDoc, IndexDoc, IndexEntry, NeuronDoc,
    PairMetrics, PrecursorDoc, ProfileToken, TargetLink, TokenRef, BUNDLE_VERSION,
};
pub use report::{comparison_text, export_report, flatten_report, render_tables, FieldValue, ReferenceValues};

use crate::clustering::{self, filter_min_cardinality, ClusterMethod, ClusterPartition};
use crate::dataset::{ModelDataset, NeuronRef, Provenance};
use crate::error::{Error, Result};
use crate::extraction::{self, CoreIndex, PairEntry, PairEnumeration};
use crate::metrics::{self, stable_mean};
use crate::par::{self, Execution};
use crate::stats::{
    self, binomial_test, chi_square_gof, kruskal_wallis, Alternative, Expected, NormalityReport, TestResult,
};

/// Significance level used for the per-record tests.
pub const ALPHA: f64 = 0.05;
/// Null proportion of shared tokens behind `d' = n - |x|/10`.
pub const SHARED_TOKEN_NULL: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub k: usize,
    pub precursors: usize,
    pub clusters: usize,
    pub min_cluster: usize,
    pub method: ClusterMethod,
    pub seed: u64,
    /// Thread count; `None` uses all cores. Never affects results.
    pub workers: Option<usize>,
    pub execution: Execution,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: extraction::DEFAULT_CORE_SIZE,
            precursors: extraction::DEFAULT_MAX_PRECURSORS,
            clusters: clustering::DEFAULT_CLUSTERS,
            min_cluster: clustering::DEFAULT_MIN_CLUSTER,
            method: ClusterMethod::Deterministic,
            seed: 0,
            workers: None,
            execution: Execution::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("k", self.k),
            ("precursors", self.precursors),
            ("clusters", self.clusters),
            ("min_cluster", self.min_cluster),
        ] {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be a positive integer")));
            }
        }
        if self.workers == Some(0) {
            return Err(Error::Validation("workers must be a positive integer".into()));
        }
        Ok(())
    }

    /// Settings that determine the results (worker count excluded).
    pub fn echo(&self) -> ConfigEcho {
        ConfigEcho {
            k: self.k,
            precursors: self.precursors,
            clusters: self.clusters,
            min_cluster: self.min_cluster,
            method: self.method,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub k: usize,
    pub precursors: usize,
    pub clusters: usize,
    pub min_cluster: usize,
    pub method: ClusterMethod,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    PrecursorActivations,
    TargetActivations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfluenceRecord {
    pub target: NeuronRef,
    pub precursor_x: NeuronRef,
    pub precursor_y: NeuronRef,
    pub m: f64,
    pub pair_count: usize,
    pub size_x: usize,
    pub size_y: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionRecord {
    pub target: NeuronRef,
    pub precursor: NeuronRef,
    pub side: Side,
    pub d: f64,
    pub taken_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClusterRef {
    pub neuron: NeuronRef,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistancingRecord {
    pub target: NeuronRef,
    pub source_cluster: ClusterRef,
    pub target_cluster: ClusterRef,
    pub size_x: usize,
    pub size_y: usize,
    pub d: f64,
    /// Kruskal-Wallis p on cross vs within-x cosines; `None` when the test
    /// could not be run.
    pub kw_p: Option<f64>,
    pub kw_ln_p: Option<f64>,
    pub n_common: usize,
    pub d_prime: f64,
    /// Exact binomial p for `n` shared tokens out of `|x|` under p0 = 0.1,
    /// alternative "less".
    pub binomial_p: f64,
    pub binomial_ln_p: f64,
}

/// A χ² goodness-of-fit p-value of a two-way split against equiprobability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitTest {
    pub statistic: f64,
    pub p: f64,
    pub ln_p: f64,
    pub log10_p: f64,
}

fn split_test(hits: usize, total: usize) -> Option<SplitTest> {
    if total == 0 {
        return None;
    }
    let r = chi_square_gof(&[hits as f64, (total - hits) as f64], Expected::Uniform).ok()?;
    Some(SplitTest { statistic: r.statistic, p: r.p_value, ln_p: r.ln_p, log10_p: r.log10_p() })
}

fn pct(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| 100.0 * hits as f64 / total as f64)
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    stable_mean(&mut values.collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub n_effective: usize,
    pub mean_m: Option<f64>,
    pub pct_below_half: Option<f64>,
    pub chi2: Option<SplitTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionTable {
    pub side: Side,
    pub n: usize,
    pub mean_d: Option<f64>,
    pub pct_positive: Option<f64>,
    pub chi2: Option<SplitTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table4 {
    pub n_d: usize,
    /// Targets contributing at least one record.
    pub n_targets: usize,
    pub mean_d: Option<f64>,
    pub pct_negative: Option<f64>,
    pub chi2: Option<SplitTest>,
    /// Records on which Kruskal-Wallis could be run.
    pub n_kw: usize,
    pub pct_kw_significant: Option<f64>,
    pub chi2_kw: Option<SplitTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table5 {
    pub n_d: usize,
    pub mean_n: Option<f64>,
    pub mean_d_prime: Option<f64>,
    pub pct_negative: Option<f64>,
    pub chi2: Option<SplitTest>,
    pub pct_binomial_significant: Option<f64>,
    pub chi2_binomial: Option<SplitTest>,
}

pub fn summarize_confluence(records: &[ConfluenceRecord]) -> Table1 {
    let n = records.len();
    let below = records.iter().filter(|r| r.m < 0.5).count();
    Table1 {
        n_effective: n,
        mean_m: mean_of(records.iter().map(|r| r.m)),
        pct_below_half: pct(below, n),
        chi2: split_test(below, n),
    }
}

pub fn summarize_dispersion(side: Side, records: &[DispersionRecord]) -> DispersionTable {
    let n = records.len();
    let positive = records.iter().filter(|r| r.d > 0.0).count();
    DispersionTable {
        side,
        n,
        mean_d: mean_of(records.iter().map(|r| r.d)),
        pct_positive: pct(positive, n),
        chi2: split_test(positive, n),
    }
}

pub fn summarize_distancing(records: &[DistancingRecord]) -> (Table4, Table5) {
    let n = records.len();
    let negative = records.iter().filter(|r| r.d < 0.0).count();
    let kw: Vec<f64> = records.iter().filter_map(|r| r.kw_p).collect();
    let kw_sig = kw.iter().filter(|&&p| p < ALPHA).count();
    let targets: std::collections::BTreeSet<NeuronRef> = records.iter().map(|r| r.target).collect();
    let t4 = Table4 {
        n_d: n,
        n_targets: targets.len(),
        mean_d: mean_of(records.iter().map(|r| r.d)),
        pct_negative: pct(negative, n),
        chi2: split_test(negative, n),
        n_kw: kw.len(),
        pct_kw_significant: pct(kw_sig, kw.len()),
        chi2_kw: split_test(kw_sig, kw.len()),
    };
    let dp_neg = records.iter().filter(|r| r.d_prime < 0.0).count();
    let bin_sig = records.iter().filter(|r| r.binomial_p < ALPHA).count();
    let t5 = Table5 {
        n_d: n,
        mean_n: mean_of(records.iter().map(|r| r.n_common as f64)),
        mean_d_prime: mean_of(records.iter().map(|r| r.d_prime)),
        pct_negative: pct(dp_neg, n),
        chi2: split_test(dp_neg, n),
        pct_binomial_significant: pct(bin_sig, n),
        chi2_binomial: split_test(bin_sig, n),
    };
    (t4, t5)
}

fn qualifying(entries: &[PairEntry], min: usize) -> Vec<&PairEntry> {
    entries.iter().filter(|e| e.partition.taken.len() >= min).collect()
}

/// Confluence over unordered pairs of each target's taken clusters holding
/// at least `min_cluster` tokens. Pairs with no remaining token pair are not
/// effective and produce no record.
pub fn run_confluence(
    dataset: &ModelDataset,
    pairs: &PairEnumeration,
    cfg: &RunConfig,
) -> Result<(Vec<ConfluenceRecord>, Table1)> {
    let groups = pairs.by_target();
    let per_target = par::try_map_ordered(cfg.execution, &groups, |entries| {
        let q = qualifying(entries, cfg.min_cluster.max(2));
        let mut out = Vec::new();
        for (i, a) in q.iter().enumerate() {
            for b in &q[i + 1..] {
                let (tx, ty) = (&a.partition.taken, &b.partition.taken);
                if let Some(c) = metrics::confluence_m(tx, ty, dataset.embeddings())? {
                    out.push(ConfluenceRecord {
                        target: a.target,
                        precursor_x: a.precursor,
                        precursor_y: b.precursor,
                        m: c.m,
                        pair_count: c.pair_count,
                        size_x: tx.len(),
                        size_y: ty.len(),
                    });
                }
            }
        }
        Ok::<_, Error>(out)
    })?;
    let records: Vec<ConfluenceRecord> = per_target.into_iter().flatten().collect();
    let table = summarize_confluence(&records);
    Ok((records, table))
}

/// Activational dispersion of every qualifying taken cluster, measured on
/// the precursor's or the target's activations.
pub fn run_dispersion(
    cores: &CoreIndex,
    pairs: &PairEnumeration,
    cfg: &RunConfig,
    side: Side,
) -> Result<(Vec<DispersionRecord>, DispersionTable)> {
    let min = cfg.min_cluster.max(2);
    let groups = pairs.by_target();
    let per_target = par::try_map_ordered(cfg.execution, &groups, |entries| {
        let mut out = Vec::new();
        for e in qualifying(entries, min) {
            let core = match side {
                Side::PrecursorActivations => cores.get(e.precursor),
                Side::TargetActivations => cores.get(e.target),
            };
            let d = metrics::dispersion_d(&e.partition.taken, &core, |id| core.activation_of(id))?;
            out.push(DispersionRecord {
                target: e.target,
                precursor: e.precursor,
                side,
                d,
                taken_size: e.partition.taken.len(),
            });
        }
        Ok::<_, Error>(out)
    })?;
    let records: Vec<DispersionRecord> = per_target.into_iter().flatten().collect();
    let table = summarize_dispersion(side, &records);
    Ok((records, table))
}

/// Categorical distancing between every qualifying source cluster of each
/// retained precursor and every qualifying cluster of the target.
pub fn run_distancing(
    dataset: &ModelDataset,
    pairs: &PairEnumeration,
    partitions: &BTreeMap<NeuronRef, ClusterPartition>,
    cfg: &RunConfig,
) -> Result<(Vec<DistancingRecord>, Table4, Table5)> {
    let groups = pairs.by_target();
    let emb = dataset.embeddings();
    let per_target = par::try_map_ordered(cfg.execution, &groups, |entries| {
        let mut out = Vec::new();
        let Some(target) = entries.first().map(|e| e.target) else { return Ok(out) };
        let Some(tp) = partitions.get(&target) else { return Ok(out) };
        let ys: Vec<(usize, &clustering::Cluster)> =
            tp.clusters.iter().enumerate().filter(|(_, c)| c.len() >= cfg.min_cluster).collect();
        for e in entries.iter() {
            let Some(sp) = partitions.get(&e.precursor) else { continue };
            for (xi, x) in sp.clusters.iter().enumerate().filter(|(_, c)| c.len() >= cfg.min_cluster) {
                for &(yi, y) in &ys {
                    let pops = metrics::distancing_populations(&x.token_ids, &y.token_ids, emb)?;
                    let Some(d) = pops.d() else { continue };
                    let kw = kruskal_wallis(&[&pops.cross, &pops.within]).ok();
                    let common = metrics::common_token_index(&x.token_ids, &y.token_ids)?;
                    let bin = binomial_test(
                        common.n as u64,
                        x.len() as u64,
                        SHARED_TOKEN_NULL,
                        Alternative::Less,
                    )?;
                    out.push(DistancingRecord {
                        target,
                        source_cluster: ClusterRef { neuron: e.precursor, cluster: xi },
                        target_cluster: ClusterRef { neuron: target, cluster: yi },
                        size_x: x.len(),
                        size_y: y.len(),
                        d,
                        kw_p: kw.as_ref().map(|r| r.p_value),
                        kw_ln_p: kw.as_ref().map(|r| r.ln_p),
                        n_common: common.n,
                        d_prime: common.d_prime,
                        binomial_p: bin.p_value,
                        binomial_ln_p: bin.ln_p,
                    });
                }
            }
        }
        Ok::<_, Error>(out)
    })?;
    let records: Vec<DistancingRecord> = per_target.into_iter().flatten().collect();
    let (t4, t5) = summarize_distancing(&records);
    Ok((records, t4, t5))
}

/// Distribution checks on each metric stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub normality: BTreeMap<String, NormalityReport>,
    /// Bartlett and Levene comparing precursor-side and target-side `d`.
    pub dispersion_sides: Option<(TestResult, TestResult)>,
}

fn diagnostics(analysis: &AnalysisRecords) -> Result<Diagnostics> {
    let streams: [(&str, Vec<f64>); 4] = [
        ("confluence_m", analysis.confluence.iter().map(|r| r.m).collect()),
        ("dispersion_precursor_d", analysis.dispersion_precursor.iter().map(|r| r.d).collect()),
        ("dispersion_target_d", analysis.dispersion_target.iter().map(|r| r.d).collect()),
        ("distancing_d", analysis.distancing.iter().map(|r| r.d).collect()),
    ];
    let mut normality = BTreeMap::new();
    for (name, values) in streams {
        let mut report = stats::normality_battery(&values)?;
        report.qq_points.clear();
        normality.insert(name.to_owned(), report);
    }
    let p: Vec<f64> = analysis.dispersion_precursor.iter().map(|r| r.d).collect();
    let t: Vec<f64> = analysis.dispersion_target.iter().map(|r| r.d).collect();
    let dispersion_sides = stats::variance_homogeneity(&[&p, &t]).ok();
    Ok(Diagnostics { normality, dispersion_sides })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCounts {
    pub targets: usize,
    pub skipped_targets: usize,
    pub pairs: usize,
    pub partitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub config: ConfigEcho,
    pub provenance: Provenance,
    pub counts: RunCounts,
    pub table1: Table1,
    pub table2: DispersionTable,
    pub table3: DispersionTable,
    pub table4: Table4,
    pub table5: Table5,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisRecords {
    pub confluence: Vec<ConfluenceRecord>,
    pub dispersion_precursor: Vec<DispersionRecord>,
    pub dispersion_target: Vec<DispersionRecord>,
    pub distancing: Vec<DistancingRecord>,
}

/// Everything produced by one run.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub report: AnalysisReport,
    pub records: AnalysisRecords,
    pub pairs: PairEnumeration,
    pub cores: CoreIndex,
    pub partitions: BTreeMap<NeuronRef, ClusterPartition>,
}

/// Runs the full analysis with deterministic clustering.
pub fn analyze(dataset: &ModelDataset, cfg: &RunConfig) -> Result<Analysis> {
    cfg.validate()?;
    par::with_workers(cfg.workers, || analyze_inner(dataset, cfg))
}

fn analyze_inner(dataset: &ModelDataset, cfg: &RunConfig) -> Result<Analysis> {
    let exec = cfg.execution;
    let cores = CoreIndex::build(dataset, cfg.k, exec)?;
    let pairs = extraction::enumerate_pairs(dataset, &cores, cfg.precursors, exec)?;
    let partitions = clustering::cluster_all(&cores, dataset.embeddings(), cfg.clusters, cfg.seed, exec)?;
    let (confluence, table1) = run_confluence(dataset, &pairs, cfg)?;
    let (dispersion_precursor, table2) = run_dispersion(&cores, &pairs, cfg, Side::PrecursorActivations)?;
    let (dispersion_target, table3) = run_dispersion(&cores, &pairs, cfg, Side::TargetActivations)?;
    let (distancing, table4, table5) = run_distancing(dataset, &pairs, &partitions, cfg)?;
    let records = AnalysisRecords { confluence, dispersion_precursor, dispersion_target, distancing };
    let report = AnalysisReport {
        config: cfg.echo(),
        provenance: dataset.provenance().clone(),
        counts: RunCounts {
            targets: dataset.targets().count(),
            skipped_targets: pairs.skipped_targets,
            pairs: pairs.entries.len(),
            partitions: partitions.len(),
        },
        table1,
        table2,
        table3,
        table4,
        table5,
        diagnostics: diagnostics(&records)?,
    };
    Ok(Analysis { report, records, pairs, cores, partitions })
}

impl Analysis {
    /// Swaps in relabelled partitions (for example from the LLM labeler).
    /// Membership must be unchanged.
    pub fn relabel(&mut self, partitions: Vec<ClusterPartition>, method: ClusterMethod) -> Result<()> {
        for p in partitions {
            let current = self
                .partitions
                .get_mut(&p.neuron)
                .ok_or_else(|| Error::Validation(format!("relabel: unknown neuron {}", p.neuron)))?;
            let same = current.clusters.len() == p.clusters.len()
                && current.clusters.iter().zip(&p.clusters).all(|(a, b)| a.token_ids == b.token_ids);
            if !same {
                return Err(Error::Validation(format!("relabel changed the membership of {}", p.neuron)));
            }
            *current = p;
        }
        self.report.config.method = method;
        Ok(())
    }

    /// Source clusters of `neuron` that meet the minimum cardinality.
    pub fn qualifying_clusters(&self, neuron: NeuronRef) -> Vec<&clustering::Cluster> {
        self.partitions
            .get(&neuron)
            .map(|p| filter_min_cardinality(&p.clusters, self.report.config.min_cluster))
            .unwrap_or_default()
    }
}
