//! Report files: summary JSON, per-record CSVs and text tables.
//!
//! Every file is a pure function of the analysis, so two runs on the same
//! input produce identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Analysis, AnalysisReport, DispersionTable, SplitTest};
use crate::clustering;
use crate::error::{Error, Result};
use crate::stats::format_p;

/// Expected values keyed by table then field, e.g.
/// `{"table1": {"mean_m": 0.453}}`. Field names match [`flatten_report`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReferenceValues(pub BTreeMap<String, BTreeMap<String, f64>>);

impl ReferenceValues {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Published values for GPT2-XL, layer 0 -> layer 1.
    pub fn published() -> Self {
        let tables: [(&str, &[(&str, f64)]); 5] = [
            (
                "table1",
                &[("n_effective", 9463.0), ("mean_m", 0.453), ("pct_below_half", 72.241), ("chi2_p", 6.78e-213)],
            ),
            ("table2", &[("n", 9007.0), ("mean_d", 0.331), ("pct_positive", 88.448), ("chi2_p", 1.47e-14)]),
            ("table3", &[("n", 9007.0), ("mean_d", 0.432), ("pct_positive", 88.385), ("chi2_p", 1.63e-14)]),
            (
                "table4",
                &[
                    ("n_d", 138367.0),
                    ("mean_d", -0.142),
                    ("pct_negative", 99.829),
                    ("chi2_p", 2.15e-23),
                    ("pct_kw_significant", 82.274),
                    ("chi2_p_kw", 1.08e-10),
                ],
            ),
            (
                "table5",
                &[
                    ("n_d", 138367.0),
                    ("mean_n", 0.349),
                    ("mean_d_prime", -1.298),
                    ("pct_negative", 97.811),
                    ("chi2_p", 1.15e-21),
                    ("pct_binomial_significant", 94.589),
                    ("chi2_p_binomial", 4.76e-19),
                ],
            ),
        ];
        Self(
            tables
                .iter()
                .map(|(t, fields)| (t.to_string(), fields.iter().map(|(f, v)| (f.to_string(), *v)).collect()))
                .collect(),
        )
    }
}

/// Computed value of one table field. p-values are carried as ln p so that
/// underflowed values still compare.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldValue {
    Plain(f64),
    LnP(f64),
}

fn put_split(out: &mut BTreeMap<String, FieldValue>, name: &str, s: &Option<SplitTest>) {
    if let Some(s) = s {
        out.insert(name.into(), FieldValue::LnP(s.ln_p));
    }
}

fn put(out: &mut BTreeMap<String, FieldValue>, name: &str, v: Option<f64>) {
    if let Some(v) = v {
        out.insert(name.into(), FieldValue::Plain(v));
    }
}

fn flatten_dispersion(t: &DispersionTable) -> BTreeMap<String, FieldValue> {
    let mut m = BTreeMap::new();
    put(&mut m, "n", Some(t.n as f64));
    put(&mut m, "mean_d", t.mean_d);
    put(&mut m, "pct_positive", t.pct_positive);
    put_split(&mut m, "chi2_p", &t.chi2);
    m
}

/// Table fields by name. Absent entries were skipped in this run.
pub fn flatten_report(r: &AnalysisReport) -> BTreeMap<String, BTreeMap<String, FieldValue>> {
    let mut out = BTreeMap::new();
    let mut t1 = BTreeMap::new();
    put(&mut t1, "n_effective", Some(r.table1.n_effective as f64));
    put(&mut t1, "mean_m", r.table1.mean_m);
    put(&mut t1, "pct_below_half", r.table1.pct_below_half);
    put_split(&mut t1, "chi2_p", &r.table1.chi2);
    out.insert("table1".into(), t1);
    out.insert("table2".into(), flatten_dispersion(&r.table2));
    out.insert("table3".into(), flatten_dispersion(&r.table3));
    let mut t4 = BTreeMap::new();
    put(&mut t4, "n_d", Some(r.table4.n_d as f64));
    put(&mut t4, "mean_d", r.table4.mean_d);
    put(&mut t4, "pct_negative", r.table4.pct_negative);
    put_split(&mut t4, "chi2_p", &r.table4.chi2);
    put(&mut t4, "pct_kw_significant", r.table4.pct_kw_significant);
    put_split(&mut t4, "chi2_p_kw", &r.table4.chi2_kw);
    out.insert("table4".into(), t4);
    let mut t5 = BTreeMap::new();
    put(&mut t5, "n_d", Some(r.table5.n_d as f64));
    put(&mut t5, "mean_n", r.table5.mean_n);
    put(&mut t5, "mean_d_prime", r.table5.mean_d_prime);
    put(&mut t5, "pct_negative", r.table5.pct_negative);
    put_split(&mut t5, "chi2_p", &r.table5.chi2);
    put(&mut t5, "pct_binomial_significant", r.table5.pct_binomial_significant);
    put_split(&mut t5, "chi2_p_binomial", &r.table5.chi2_binomial);
    out.insert("table5".into(), t5);
    out
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "skipped".into(), |v| format!("{v:.digits$}"))
}

fn row(out: &mut String, label: &str, value: impl std::fmt::Display) {
    let _ = writeln!(out, "{label:<34}{value}");
}

fn split_rows(out: &mut String, label: &str, s: &Option<SplitTest>) {
    match s {
        Some(s) => {
            row(out, &format!("{label} chi2"), format!("{:.3}", s.statistic));
            row(out, &format!("{label} p"), format_p(s.ln_p));
        }
        None => row(out, &format!("{label} chi2"), "skipped"),
    }
}

fn dispersion_text(title: &str, t: &DispersionTable) -> String {
    let mut s = format!("{title}\n");
    if t.n == 0 {
        s.push_str("skipped: no taken cluster met the minimum size\n");
    }
    row(&mut s, "N", t.n);
    row(&mut s, "Mean d", opt(t.mean_d, 3));
    row(&mut s, "% d > 0", opt(t.pct_positive, 3));
    split_rows(&mut s, "d > 0 vs d <= 0", &t.chi2);
    s
}

/// Text renderings of the five tables, in order.
pub fn render_tables(r: &AnalysisReport) -> [String; 5] {
    let mut t1 = "Table 1. Semantic confluence of taken clusters\n".to_string();
    if r.table1.n_effective == 0 {
        t1.push_str("skipped: no effective comparison\n");
    }
    row(&mut t1, "N (effective comparisons)", r.table1.n_effective);
    row(&mut t1, "Mean m", opt(r.table1.mean_m, 3));
    row(&mut t1, "% m < 0.5", opt(r.table1.pct_below_half, 3));
    split_rows(&mut t1, "m < 0.5 vs m >= 0.5", &r.table1.chi2);

    let t2 = dispersion_text("Table 2. Activational dispersion, precursor activations", &r.table2);
    let t3 = dispersion_text("Table 3. Activational dispersion, target activations", &r.table3);

    let mut t4 = "Table 4. Categorical distancing\n".to_string();
    if r.table4.n_d == 0 {
        t4.push_str("skipped: no cluster pair met the minimum size\n");
    }
    row(&mut t4, "N_d", r.table4.n_d);
    row(&mut t4, "Target neurons", r.table4.n_targets);
    row(&mut t4, "Mean d", opt(r.table4.mean_d, 3));
    row(&mut t4, "% d < 0", opt(r.table4.pct_negative, 3));
    split_rows(&mut t4, "d < 0 vs d >= 0", &r.table4.chi2);
    row(&mut t4, "Kruskal-Wallis runs", r.table4.n_kw);
    row(&mut t4, "% p_KW < .05", opt(r.table4.pct_kw_significant, 3));
    split_rows(&mut t4, "p_KW < .05 vs rest", &r.table4.chi2_kw);

    let mut t5 = "Table 5. Shared-token index\n".to_string();
    if r.table5.n_d == 0 {
        t5.push_str("skipped: no cluster pair met the minimum size\n");
    }
    row(&mut t5, "N_d", r.table5.n_d);
    row(&mut t5, "Mean n", opt(r.table5.mean_n, 3));
    row(&mut t5, "Mean d'", opt(r.table5.mean_d_prime, 3));
    row(&mut t5, "% d' < 0", opt(r.table5.pct_negative, 3));
    split_rows(&mut t5, "d' < 0 vs d' >= 0", &r.table5.chi2);
    row(&mut t5, "% p_binomial < .05", opt(r.table5.pct_binomial_significant, 3));
    split_rows(&mut t5, "p_binomial < .05 vs rest", &r.table5.chi2_binomial);
    [t1, t2, t3, t4, t5]
}

fn config_text(r: &AnalysisReport) -> String {
    let c = &r.config;
    let mut s = String::new();
    for (k, v) in [
        ("k", c.k.to_string()),
        ("precursors", c.precursors.to_string()),
        ("clusters", c.clusters.to_string()),
        ("min_cluster", c.min_cluster.to_string()),
        ("method", c.method.to_string()),
        ("seed", c.seed.to_string()),
        ("source", r.provenance.source.clone()),
        ("content_hash", r.provenance.content_hash.clone()),
    ] {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

/// Side-by-side table of computed and expected values. p-values are
/// compared on the log10 scale.
pub fn comparison_text(r: &AnalysisReport, reference: &ReferenceValues) -> String {
    let computed = flatten_report(r);
    let mut s = format!("{:<8}{:<28}{:>16}{:>16}{:>14}\n", "table", "field", "computed", "reference", "delta");
    let mut any_p = false;
    for (table, fields) in &reference.0 {
        for (field, &expected) in fields {
            let got = computed.get(table).and_then(|t| t.get(field));
            let (c, e, d) = match got {
                None => ("skipped".to_string(), format!("{expected}"), "-".to_string()),
                Some(FieldValue::Plain(v)) => (format!("{v:.6}"), format!("{expected}"), format!("{:+.6}", v - expected)),
                Some(FieldValue::LnP(lnp)) => {
                    any_p = true;
                    let log10 = lnp / std::f64::consts::LN_10;
                    let delta = log10 - expected.log10();
                    (format_p(*lnp), format!("{expected:.2E}"), format!("{delta:+.2} log10"))
                }
            };
            let _ = writeln!(s, "{table:<8}{field:<28}{c:>16}{e:>16}{d:>14}");
        }
    }
    if any_p {
        s.push_str(
            "\nnote: reference p-values are not reproduced by a df=1 chi-square on the \
             reported split; computed p-values come from this run's own test.\n",
        );
    }
    s
}

fn write(path: PathBuf, bytes: impl AsRef<[u8]>, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Validation(format!("csv encoding: {e}"));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Validation(format!("csv encoding: {e}")))
}

fn opt_str(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes the report files into `dir` and returns their paths.
///
/// Files: `summary.json`, `table1.txt`..`table5.txt`, `config.txt`,
/// `confluence.csv`, `dispersion_precursor.csv`, `dispersion_target.csv`,
/// `distancing.csv`, `pairs.csv`, `partitions.jsonl`, and `comparison.txt`
/// when reference values are given.
pub fn export_report(analysis: &Analysis, dir: &Path, reference: Option<&ReferenceValues>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let r = &analysis.report;
    let mut written = Vec::new();

    let mut json = serde_json::to_string_pretty(r)?;
    json.push('\n');
    write(dir.join("summary.json"), json, &mut written)?;
    for (i, text) in render_tables(r).iter().enumerate() {
        write(dir.join(format!("table{}.txt", i + 1)), text, &mut written)?;
    }
    write(dir.join("config.txt"), config_text(r), &mut written)?;

    let rec = &analysis.records;
    let confluence = csv_bytes(
        &["target_layer", "target_index", "x_layer", "x_index", "y_layer", "y_index", "size_x", "size_y", "pair_count", "m"],
        rec.confluence.iter().map(|c| {
            vec![
                c.target.layer.to_string(),
                c.target.index.to_string(),
                c.precursor_x.layer.to_string(),
                c.precursor_x.index.to_string(),
                c.precursor_y.layer.to_string(),
                c.precursor_y.index.to_string(),
                c.size_x.to_string(),
                c.size_y.to_string(),
                c.pair_count.to_string(),
                c.m.to_string(),
            ]
        }),
    )?;
    write(dir.join("confluence.csv"), confluence, &mut written)?;

    for (name, records) in [
        ("dispersion_precursor.csv", &rec.dispersion_precursor),
        ("dispersion_target.csv", &rec.dispersion_target),
    ] {
        let bytes = csv_bytes(
            &["target_layer", "target_index", "precursor_layer", "precursor_index", "taken_size", "d"],
            records.iter().map(|d| {
                vec![
                    d.target.layer.to_string(),
                    d.target.index.to_string(),
                    d.precursor.layer.to_string(),
                    d.precursor.index.to_string(),
                    d.taken_size.to_string(),
                    d.d.to_string(),
                ]
            }),
        )?;
        write(dir.join(name), bytes, &mut written)?;
    }

    let distancing = csv_bytes(
        &[
            "target_layer",
            "target_index",
            "source_layer",
            "source_index",
            "source_cluster",
            "target_cluster",
            "size_x",
            "size_y",
            "d",
            "kw_p",
            "n",
            "d_prime",
            "binomial_p",
        ],
        rec.distancing.iter().map(|d| {
            vec![
                d.target.layer.to_string(),
                d.target.index.to_string(),
                d.source_cluster.neuron.layer.to_string(),
                d.source_cluster.neuron.index.to_string(),
                d.source_cluster.cluster.to_string(),
                d.target_cluster.cluster.to_string(),
                d.size_x.to_string(),
                d.size_y.to_string(),
                d.d.to_string(),
                opt_str(d.kw_p),
                d.n_common.to_string(),
                d.d_prime.to_string(),
                d.binomial_p.to_string(),
            ]
        }),
    )?;
    write(dir.join("distancing.csv"), distancing, &mut written)?;

    let pairs = csv_bytes(
        &["target_layer", "target_index", "precursor_layer", "precursor_index", "rank", "weight", "taken_size", "left_size", "taken_ids"],
        analysis.pairs.entries.iter().map(|e| {
            let ids: Vec<String> = e.partition.taken.iter().map(u32::to_string).collect();
            vec![
                e.target.layer.to_string(),
                e.target.index.to_string(),
                e.precursor.layer.to_string(),
                e.precursor.index.to_string(),
                e.rank.to_string(),
                e.weight.to_string(),
                e.partition.taken.len().to_string(),
                e.partition.left.len().to_string(),
                ids.join(" "),
            ]
        }),
    )?;
    write(dir.join("pairs.csv"), pairs, &mut written)?;

    let mut jsonl = Vec::new();
    clustering::encode_partitions(&mut jsonl, analysis.partitions.values())?;
    write(dir.join("partitions.jsonl"), jsonl, &mut written)?;

    if let Some(reference) = reference {
        write(dir.join("comparison.txt"), comparison_text(r, reference), &mut written)?;
    }
    Ok(written)
}
