//! Optional cluster naming through an external text-generation endpoint.
//!
//! Requests are `POST {endpoint}` with JSON `{"model", "prompt"}`. The reply
//! may be `{"label": ...}`, `{"response": ...}` or a bare string. Labels are
//! cached by neuron and token-id set, so reruns make no network calls.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ClusterMethod, ClusterPartition};
use crate::dataset::NeuronRef;
use crate::error::{Error, Result};

pub const PROMPT_TEMPLATE: &str = include_str!("../../../../prompts/cluster_label.txt");
const MAX_LABEL_WORDS: usize = 5;

#[derive(Debug, Clone)]
pub struct LabelerConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub cache_path: PathBuf,
    pub concurrency: usize,
    /// First retry delay; doubles on each further attempt.
    pub backoff: Duration,
}

impl LabelerConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, cache_path: impl Into<PathBuf>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            timeout: Duration::from_secs(30),
            max_retries: 3,
            cache_path: cache_path.into(),
            concurrency: 4,
            backoff: Duration::from_millis(500),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timeout.is_zero() {
            return Err(Error::Validation("labeler timeout must be > 0".into()));
        }
        if self.endpoint.is_empty() {
            return Err(Error::Validation("labeler endpoint is empty".into()));
        }
        Ok(())
    }
}

/// Sends one request body and returns the raw response text.
pub trait LabelTransport: Send + Sync {
    fn post(&self, endpoint: &str, body: &serde_json::Value, timeout: Duration)
        -> std::result::Result<String, String>;
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new() -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| Error::Labeler(format!("cannot build HTTP client: {e}")))?;
        Ok(Self { client })
    }
}

impl LabelTransport for HttpTransport {
    fn post(
        &self,
        endpoint: &str,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> std::result::Result<String, String> {
        let resp = self
            .client
            .post(endpoint)
            .timeout(timeout)
            .json(body)
            .send()
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        let text = resp.text().map_err(|e| e.to_string())?;
        if status.is_success() {
            Ok(text)
        } else {
            Err(format!("HTTP {status}: {}", text.chars().take(200).collect::<String>()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub label: String,
    pub timestamp: u64,
}

/// Thread-safe label cache persisted as JSONL.
pub struct LabelCache {
    path: PathBuf,
    entries: Mutex<BTreeMap<String, CacheEntry>>,
}

impl LabelCache {
    /// Loads `path` if it exists; a missing file gives an empty cache.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        if path.exists() {
            let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let e: CacheEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                entries.insert(e.key.clone(), e);
            }
        }
        Ok(Self { path: path.to_path_buf(), entries: Mutex::new(entries) })
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries.lock().expect("cache lock").get(key).map(|e| e.label.clone())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&self, key: String, label: String) {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let entry = CacheEntry { key: key.clone(), label, timestamp };
        self.entries.lock().expect("cache lock").insert(key, entry);
    }

    /// Writes the cache to a sibling temp file and renames it into place.
    pub fn save(&self) -> Result<()> {
        let mut buf = Vec::new();
        for e in self.entries.lock().expect("cache lock").values() {
            serde_json::to_writer(&mut buf, e)?;
            buf.push(b'\n');
        }
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = self.path.with_extension("jsonl.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &self.path).map_err(|e| Error::io(&self.path, e))
    }
}

/// Cache key: sha256 over the neuron and its sorted token ids.
pub fn cache_key(neuron: NeuronRef, ids: impl IntoIterator<Item = u32>) -> String {
    let mut ids: Vec<u32> = ids.into_iter().collect();
    ids.sort_unstable();
    let mut h = Sha256::new();
    h.update(format!("{}:{}|", neuron.layer, neuron.index));
    for id in ids {
        h.update(format!("{id},"));
    }
    hex::encode(h.finalize())
}

pub fn build_prompt(surfaces: &[String]) -> String {
    let tokens = surfaces
        .iter()
        .map(|s| serde_json::to_string(s).expect("string serializes"))
        .collect::<Vec<_>>()
        .join("\n");
    PROMPT_TEMPLATE.replace("{tokens}", &tokens)
}

/// Extracts a label of at most five words from a response body.
pub fn parse_label(body: &str) -> Option<String> {
    let raw = match serde_json::from_str::<serde_json::Value>(body.trim()) {
        Ok(serde_json::Value::Object(map)) => {
            let field = map.get("label").or_else(|| map.get("response"))?;
            let text = field.as_str()?;
            // Some models wrap the JSON answer inside `response`.
            match serde_json::from_str::<serde_json::Value>(text.trim()) {
                Ok(serde_json::Value::Object(inner)) => inner.get("label")?.as_str()?.to_owned(),
                _ => text.to_owned(),
            }
        }
        Ok(serde_json::Value::String(s)) => s,
        Ok(_) => return None,
        Err(_) => body.to_owned(),
    };
    let first_line = raw.lines().map(str::trim).find(|l| !l.is_empty())?;
    let cleaned = first_line.trim_matches(|c: char| c == '"' || c == '\'' || c == '.' || c.is_whitespace());
    let words: Vec<&str> = cleaned.split_whitespace().take(MAX_LABEL_WORDS).collect();
    (!words.is_empty()).then(|| words.join(" "))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFailure {
    pub neuron: NeuronRef,
    pub cluster: usize,
    pub attempts: u32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelingOutcome {
    pub partitions: Vec<ClusterPartition>,
    pub failures: Vec<LabelFailure>,
    pub network_calls: usize,
}

type JobResult = std::result::Result<String, (u32, String)>;

struct Job {
    partition: usize,
    cluster: usize,
    key: String,
    prompt: String,
}

fn request_label(
    job: &Job,
    cfg: &LabelerConfig,
    transport: &dyn LabelTransport,
    calls: &AtomicUsize,
) -> std::result::Result<String, (u32, String)> {
    let body = serde_json::json!({ "model": cfg.model, "prompt": job.prompt });
    let mut last = String::new();
    for attempt in 0..=cfg.max_retries {
        if attempt > 0 {
            std::thread::sleep(cfg.backoff * 2u32.saturating_pow(attempt - 1));
        }
        calls.fetch_add(1, Ordering::Relaxed);
        match transport.post(&cfg.endpoint, &body, cfg.timeout) {
            Ok(text) => match parse_label(&text) {
                Some(label) => return Ok(label),
                None => last = format!("malformed response: {}", text.chars().take(120).collect::<String>()),
            },
            Err(e) => last = e,
        }
        log::debug!("label request {} attempt {} failed: {last}", job.key, attempt + 1);
    }
    Err((cfg.max_retries + 1, last))
}

/// Labels every cluster of every partition. Membership is never changed;
/// clusters whose requests exhaust their retries keep the placeholder label
/// and are listed in `failures`. Successful labels are cached and the cache
/// is saved before returning.
pub fn label_partitions(
    partitions: &[ClusterPartition],
    surface: &(dyn Fn(u32) -> String + Sync),
    cfg: &LabelerConfig,
    transport: &dyn LabelTransport,
    cache: &LabelCache,
) -> Result<LabelingOutcome> {
    cfg.validate()?;
    let mut out: Vec<ClusterPartition> = partitions.to_vec();
    let mut jobs = Vec::new();
    for (pi, p) in out.iter_mut().enumerate() {
        p.method = ClusterMethod::Llm;
        for (ci, c) in p.clusters.iter_mut().enumerate() {
            let key = cache_key(p.neuron, c.token_ids.iter().copied());
            if let Some(label) = cache.get(&key) {
                c.label = label;
                continue;
            }
            let surfaces: Vec<String> = c.token_ids.iter().map(|&id| surface(id)).collect();
            jobs.push(Job { partition: pi, cluster: ci, key, prompt: build_prompt(&surfaces) });
        }
    }

    let calls = AtomicUsize::new(0);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, JobResult)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..cfg.concurrency.max(1).min(jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = request_label(job, cfg, transport, &calls);
                if let Ok(label) = &r {
                    cache.insert(job.key.clone(), label.clone());
                }
                results.lock().expect("results lock").push((i, r));
            });
        }
    });

    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|(i, _)| *i);
    let mut failures = Vec::new();
    for (i, r) in results {
        let job = &jobs[i];
        match r {
            Ok(label) => out[job.partition].clusters[job.cluster].label = label,
            Err((attempts, error)) => {
                log::warn!("labeling {} cluster {} failed: {error}", out[job.partition].neuron, job.cluster);
                failures.push(LabelFailure {
                    neuron: out[job.partition].neuron,
                    cluster: job.cluster,
                    attempts,
                    error,
                });
            }
        }
    }
    cache.save()?;
    Ok(LabelingOutcome {
        partitions: out,
        failures,
        network_calls: calls.into_inner(),
    })
}

/// Single-partition convenience wrapper around [`label_partitions`].
pub fn label_clusters_llm(
    partition: &ClusterPartition,
    surface: &(dyn Fn(u32) -> String + Sync),
    cfg: &LabelerConfig,
    transport: &dyn LabelTransport,
    cache: &LabelCache,
) -> Result<LabelingOutcome> {
    label_partitions(std::slice::from_ref(partition), surface, cfg, transport, cache)
}
