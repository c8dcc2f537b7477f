//! Acceptance gate. Prints one PASS/FAIL/SKIP line per criterion and fails
//! if any criterion fails.
//!
//! Criteria run one after another inside a single test so that each
//! runtime budget is measured without other tests competing for cores.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use catres_core::dataset::{ActivationProfile, DatasetPaths, EmbeddingTable, NeuronRef, TokenEntry};
use catres_core::extraction::core_tokens;
use catres_core::metrics::{common_token_index, confluence_m, dispersion_d, distancing_d};
use catres_core::par::Execution;
use catres_core::pipeline::{analyze, export_report, RunConfig};
use catres_core::stats::special::normal_cdf;
use catres_core::stats::*;
use catres_core::synth::{generate, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};

struct Outcome {
    name: &'static str,
    pass: Option<bool>,
    detail: String,
    elapsed: Duration,
}

fn timed(name: &'static str, budget: Option<Duration>, f: impl FnOnce() -> (Option<bool>, String)) -> Outcome {
    let start = Instant::now();
    let (pass, mut detail) = f();
    let elapsed = start.elapsed();
    let pass = match (pass, budget) {
        (Some(p), Some(b)) => {
            if elapsed > b {
                detail.push_str(&format!("; over budget {:.1}s", b.as_secs_f64()));
            }
            Some(p && elapsed <= b)
        }
        (p, _) => p,
    };
    Outcome { name, pass, detail, elapsed }
}

// ---------- metric oracle ----------

/// Relative closeness with unit floor: cosines and their means are O(1),
/// so values that cancel to near zero are compared on an absolute scale.
fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

fn brute_cos(emb: &[Vec<f64>], i: u32, j: u32) -> f64 {
    let (u, v) = (&emb[i as usize], &emb[j as usize]);
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for k in 0..u.len() {
        dot += u[k] * v[k];
        nu += u[k] * u[k];
        nv += v[k] * v[k];
    }
    (dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0)
}

fn brute_cross_mean(emb: &[Vec<f64>], x: &[u32], y: &[u32]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &a in x {
        for &b in y {
            if a != b {
                sum += brute_cos(emb, a, b);
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

fn brute_within_mean(emb: &[Vec<f64>], x: &[u32]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &a) in x.iter().enumerate() {
        for &b in &x[i + 1..] {
            sum += brute_cos(emb, a, b);
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Type-7 first quartile by explicit order statistics.
fn brute_q1(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.25 * (v.len() - 1) as f64;
    let below = pos.floor() as usize;
    let frac = pos - below as f64;
    if frac == 0.0 {
        v[below]
    } else {
        (1.0 - frac) * v[below] + frac * v[below + 1]
    }
}

fn brute_dispersion(taken: &[u32], core: &[(u32, f64)]) -> f64 {
    let act = |id: u32| core.iter().find(|(c, _)| *c == id).unwrap().1;
    let mut gaps = Vec::new();
    for (i, &a) in taken.iter().enumerate() {
        for &b in &taken[i + 1..] {
            gaps.push((act(a) - act(b)).abs());
        }
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let mut all = Vec::new();
    for (i, a) in core.iter().enumerate() {
        for b in &core[i + 1..] {
            all.push((a.1 - b.1).abs());
        }
    }
    mean - brute_q1(all)
}

fn sample_ids(rng: &mut ChaCha8Rng, vocab: u32, max: usize) -> Vec<u32> {
    let n = rng.random_range(1..=max);
    let mut s = BTreeSet::new();
    while s.len() < n {
        s.insert(rng.random_range(0..vocab));
    }
    s.into_iter().collect()
}

fn metric_oracle() -> (Option<bool>, String) {
    let mut mismatches = Vec::new();
    let mut checks = 0usize;
    for inst in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(inst);
        let vocab = rng.random_range(8..24u32);
        let dim = rng.random_range(2..9usize);
        let rows: Vec<f32> = (0..vocab as usize * dim)
            .map(|_| {
                let v: f32 = rng.random_range(-1.0..1.0);
                if v.abs() < 1e-3 { 0.5 } else { v }
            })
            .collect();
        let table = EmbeddingTable::new(dim, rows.clone()).unwrap();
        let emb: Vec<Vec<f64>> = rows.chunks(dim).map(|r| r.iter().map(|&v| v as f64).collect()).collect();

        let x = sample_ids(&mut rng, vocab, 8);
        let y = sample_ids(&mut rng, vocab, 8);

        let got = confluence_m(&x, &y, &table).unwrap().map(|c| c.m);
        let want = brute_cross_mean(&emb, &x, &y);
        checks += 1;
        if !matches!((got, want), (Some(a), Some(b)) if close(a, b)) && !(got.is_none() && want.is_none()) {
            mismatches.push(format!("confluence #{inst}: {got:?} vs {want:?}"));
        }

        let got = distancing_d(&x, &y, &table).unwrap();
        let want = brute_cross_mean(&emb, &x, &y).zip(brute_within_mean(&emb, &x)).map(|(c, w)| c - w);
        checks += 1;
        if !matches!((got, want), (Some(a), Some(b)) if close(a, b)) && !(got.is_none() && want.is_none()) {
            mismatches.push(format!("distancing #{inst}: {got:?} vs {want:?}"));
        }

        let c = common_token_index(&x, &y).unwrap();
        let n = x.iter().filter(|id| y.contains(id)).count();
        checks += 1;
        if c.n != n || !close(c.d_prime, n as f64 - x.len() as f64 / 10.0) {
            mismatches.push(format!("common tokens #{inst}"));
        }

        // Dispersion on a core of 2..=8 tokens with a taken subset of >= 2.
        let core_ids = loop {
            let ids = sample_ids(&mut rng, vocab, 8);
            if ids.len() >= 2 {
                break ids;
            }
        };
        let core: Vec<(u32, f64)> = core_ids.iter().map(|&id| (id, rng.random_range(0.0..5.0))).collect();
        let mut taken: Vec<u32> = core_ids.iter().copied().filter(|_| rng.random_bool(0.6)).collect();
        if taken.len() < 2 {
            taken = core_ids[..2].to_vec();
        }
        let profile = ActivationProfile::new(
            NeuronRef::new(0, 0),
            core.iter().map(|&(id, a)| TokenEntry { token_id: id, surface: format!("t{id}"), activation: a }).collect(),
        )
        .unwrap();
        let cs = core_tokens(&profile, 8).unwrap();
        let got = dispersion_d(&taken, &cs, |id| cs.activation_of(id)).unwrap();
        let want = brute_dispersion(&taken, &core);
        checks += 1;
        if !close(got, want) {
            mismatches.push(format!("dispersion #{inst}: {got} vs {want}"));
        }
    }
    let detail = format!("{checks} checks, {} mismatches{}", mismatches.len(), mismatches.first().map(|m| format!(" (first: {m})")).unwrap_or_default());
    (Some(mismatches.is_empty()), detail)
}

// ---------- statistics golden suite ----------

fn stats_golden() -> (Option<bool>, String) {
    let mut fails = Vec::new();
    let g = chi_square_gof(&[60.0, 40.0], Expected::Uniform).unwrap();
    if (g.statistic - 4.0).abs() > 1e-12 || (g.p_value - 0.04550).abs() > 1e-4 {
        fails.push(format!("gof {} {}", g.statistic, g.p_value));
    }
    let kw = kruskal_wallis_with_min(&[&[1., 2., 3.], &[4., 5., 6.], &[7., 8., 9.]], 1).unwrap();
    if (kw.statistic - 7.2).abs() > 1e-9 {
        fails.push(format!("kw {}", kw.statistic));
    }
    let b = binomial_test(3, 10, 0.5, Alternative::TwoSided).unwrap();
    if b.p_value != 0.34375 {
        fails.push(format!("binomial {}", b.p_value));
    }
    let mut sym = 0;
    for n in 1..=30u64 {
        for k in 0..=n {
            let p = binomial_test(k, n, 0.5, Alternative::TwoSided).unwrap().p_value;
            let q = binomial_test(n - k, n, 0.5, Alternative::TwoSided).unwrap().p_value;
            sym += 1;
            if p != q {
                fails.push(format!("symmetry n={n} k={k}: {p} vs {q}"));
            }
        }
    }
    (Some(fails.is_empty()), format!("gof/kw/binomial + {sym} symmetry pairs; failures: {fails:?}"))
}

// ---------- calibration ----------

const REPS: u64 = 2000;

fn calibration() -> (Option<bool>, String) {
    let nd = Normal::new(0.0, 1.0).unwrap();
    let names = ["chi2_gof", "kruskal_wallis", "binomial", "shapiro_wilk", "lilliefors", "ks", "jarque_bera", "bartlett", "levene"];
    let mut rejections = [0usize; 9];
    for r in 0..REPS {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000_000 + r);
        let mut normals = |n: usize| -> Vec<f64> { (0..n).map(|_| nd.sample(&mut rng)).collect() };
        let x100 = normals(100);
        let x1000 = normals(1000);
        let (a, b, c) = (normals(10), normals(10), normals(10));
        let (v1, v2) = (normals(100), normals(100));
        let mut counts = [0.0f64; 4];
        for _ in 0..200 {
            counts[rng.random_range(0..4)] += 1.0;
        }
        // n = 61 under p0 = 0.1 has exact size 4.91% for the lower tail.
        let k = Binomial::new(61, 0.1).unwrap().sample(&mut rng);
        let ps = [
            chi_square_gof(&counts, Expected::Uniform).unwrap().p_value,
            kruskal_wallis(&[&a, &b, &c]).unwrap().p_value,
            binomial_test(k, 61, 0.1, Alternative::Less).unwrap().p_value,
            shapiro_wilk(&x100).unwrap().p_value,
            lilliefors(&x100).unwrap().p_value,
            kolmogorov_smirnov(&x100, normal_cdf).unwrap().p_value,
            jarque_bera(&x1000).unwrap().p_value,
            bartlett(&[&v1, &v2]).unwrap().p_value,
            levene(&[&v1, &v2]).unwrap().p_value,
        ];
        for (i, p) in ps.iter().enumerate() {
            if *p < 0.05 {
                rejections[i] += 1;
            }
        }
    }
    let rates: Vec<f64> = rejections.iter().map(|&r| r as f64 / REPS as f64).collect();
    let ok = rates.iter().all(|r| (0.03..=0.07).contains(r));
    let detail = names.iter().zip(&rates).map(|(n, r)| format!("{n} {:.2}%", 100.0 * r)).collect::<Vec<_>>().join(", ");
    (Some(ok), detail)
}

// ---------- planted effects ----------

fn planted(seed: u64) -> SynthConfig {
    SynthConfig { seed, vocab_size: 2000, layer0_size: 64, layer1_size: 64, ..SynthConfig::default() }
}

fn planted_effects() -> (Option<bool>, String) {
    let cfg = RunConfig::default();
    let mut a_hits = 0;
    let mut b_hits = 0;
    let mut c_hits = 0;
    let mut notes = Vec::new();
    for seed in 0..10 {
        let mean_m = |phasing: f64| {
            let (d, _) = generate(&SynthConfig { phasing_strength: phasing, ..planted(seed) }).unwrap();
            analyze(&d, &cfg).unwrap().report.table1.mean_m
        };
        let (hi, zero) = (mean_m(1.0), mean_m(0.0));
        if matches!((hi, zero), (Some(h), Some(z)) if h > z) {
            a_hits += 1;
        }

        let (d, _) = generate(&SynthConfig { phasing_noise: 0.8, ..planted(seed) }).unwrap();
        let r = analyze(&d, &cfg).unwrap().records;
        let all: Vec<f64> = r.dispersion_precursor.iter().chain(&r.dispersion_target).map(|x| x.d).collect();
        let frac_b = all.iter().filter(|&&d| d > 0.0).count() as f64 / all.len().max(1) as f64;
        if !all.is_empty() && frac_b > 0.5 {
            b_hits += 1;
        }

        // No phasing and no priming: target categories are remixes of
        // precursor sub-groups.
        let remix = SynthConfig { phasing_strength: 0.0, priming_sharpness: 0.0, activation_noise: 0.5, ..planted(seed) };
        let (d, _) = generate(&remix).unwrap();
        let r = analyze(&d, &cfg).unwrap().records;
        let frac_c = r.distancing.iter().filter(|x| x.d < 0.0).count() as f64 / r.distancing.len().max(1) as f64;
        if !r.distancing.is_empty() && frac_c >= 0.9 {
            c_hits += 1;
        }
        if seed == 0 {
            notes.push(format!("seed0: m {hi:?} vs {zero:?}, d>0 {:.1}%, d<0 {:.1}%", 100.0 * frac_b, 100.0 * frac_c));
        }
    }
    let ok = a_hits == 10 && b_hits >= 8 && c_hits == 10;
    (Some(ok), format!("(a) {a_hits}/10, (b) {b_hits}/10, (c) {c_hits}/10; {}", notes.join("")))
}

// ---------- determinism ----------

fn determinism() -> (Option<bool>, String) {
    let (d, _) = generate(&SynthConfig { seed: 3, ..SynthConfig::default() }).unwrap();
    let one = RunConfig { workers: Some(1), execution: Execution::Sequential, ..RunConfig::default() };
    let many = RunConfig { workers: Some(8), execution: Execution::Parallel, ..RunConfig::default() };
    let (a, b) = (analyze(&d, &one).unwrap(), analyze(&d, &many).unwrap());
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let files = export_report(&a, da.path(), None).unwrap();
    export_report(&b, db.path(), None).unwrap();
    let mut differing = Vec::new();
    for f in &files {
        let name = f.file_name().unwrap();
        if std::fs::read(f).unwrap() != std::fs::read(db.path().join(name)).unwrap() {
            differing.push(name.to_string_lossy().into_owned());
        }
    }
    (Some(differing.is_empty()), format!("{} report files compared, differing: {differing:?}", files.len()))
}

// ---------- optional large-scale comparison ----------

fn reference_comparison() -> (Option<bool>, String) {
    let Ok(dir) = std::env::var("CATRES_REFERENCE_DATA") else {
        return (None, "CATRES_REFERENCE_DATA not set".into());
    };
    let source_layer = std::env::var("CATRES_REFERENCE_SOURCE_LAYER").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    let d = match DatasetPaths::in_dir(std::path::Path::new(&dir)).load(source_layer) {
        Ok(d) => d,
        Err(e) => return (Some(false), format!("load failed: {e}")),
    };
    let r = analyze(&d, &RunConfig::default()).unwrap().report;
    let within = |v: Option<f64>, target: f64, tol: f64| v.is_some_and(|v| (v - target).abs() <= tol);
    let checks = [
        ("table1 mean m", within(r.table1.mean_m, 0.453, 0.02)),
        ("table1 % below 0.5", within(r.table1.pct_below_half, 72.241, 2.0)),
        ("table2 mean d", within(r.table2.mean_d, 0.331, 0.02)),
        ("table3 mean d", within(r.table3.mean_d, 0.432, 0.02)),
        ("table4 % negative", r.table4.pct_negative.is_some_and(|p| p >= 99.0)),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    (
        Some(failed.is_empty()),
        format!(
            "m {:?}, %<.5 {:?}, d2 {:?}, d3 {:?}, %neg4 {:?}; failed: {failed:?}",
            r.table1.mean_m, r.table1.pct_below_half, r.table2.mean_d, r.table3.mean_d, r.table4.pct_negative
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let outcomes = [
        timed("metric oracle equivalence", Some(Duration::from_secs(10)), metric_oracle),
        timed("statistics golden suite", Some(Duration::from_secs(5)), stats_golden),
        timed("calibration at alpha 0.05", Some(Duration::from_secs(120)), calibration),
        timed("planted-effect detection", Some(Duration::from_secs(180)), planted_effects),
        timed("determinism and parallel/serial equivalence", None, determinism),
        timed("optional reference-data comparison", None, reference_comparison),
    ];
    println!();
    for o in &outcomes {
        let status = match o.pass {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIP",
        };
        println!("[{status}] {} ({:.2}s): {}", o.name, o.elapsed.as_secs_f64(), o.detail);
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| o.pass == Some(false)).map(|o| o.name).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
