//! `catres`: ingest, synthesize, analyze, export and serve.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 I/O failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use catres_core::clustering::labeler::{label_partitions, HttpTransport, LabelCache, LabelerConfig};
use catres_core::clustering::ClusterMethod;
use catres_core::dataset::{DatasetPaths, ModelDataset};
use catres_core::par::Execution;
use catres_core::pipeline::{analyze, export_report, export_viewer_bundle, render_tables, Analysis, ReferenceValues, RunConfig};
use catres_core::synth::{generate, write_synthetic, SynthConfig};
use catres_server::{serve_blocking, ServerConfig, ServerError};

use config::ConfigFile;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Io(m) => write!(f, "I/O failure: {m}"),
        }
    }
}

impl From<catres_core::Error> for CliError {
    fn from(e: catres_core::Error) -> Self {
        if e.is_validation() || matches!(e, catres_core::Error::Json(_)) {
            CliError::Validation(e.to_string())
        } else {
            CliError::Io(e.to_string())
        }
    }
}

impl From<ServerError> for CliError {
    fn from(e: ServerError) -> Self {
        match e {
            ServerError::Io { .. } => CliError::Io(e.to_string()),
            ServerError::Core(c) => c.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "catres", version, about = "Categorical restructuring analysis of neuron activation data")]
struct Cli {
    /// key = value file supplying defaults for any long flag
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate input files and write a canonical dataset directory
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with planted effects
    Synth(SynthArgs),
    /// Run the analysis and write the report
    Analyze {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON file of expected table values, or "published"
        #[arg(long)]
        paper_compare: Option<String>,
    },
    /// Run the analysis and write the viewer bundle
    Export {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a viewer bundle over HTTP
    Serve {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        cors_origin: Option<String>,
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding profiles.jsonl, weights.bin, embeddings.bin and optionally vocab.jsonl
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    profiles: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Layer number of the weight matrix's source side
    #[arg(long)]
    source_layer: Option<u32>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    precursors: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    min_cluster: Option<usize>,
    /// deterministic | llm
    #[arg(long)]
    method: Option<ClusterMethod>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Disable data-parallel execution
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    llm_endpoint: Option<String>,
    #[arg(long)]
    llm_model: Option<String>,
    #[arg(long)]
    llm_cache: Option<PathBuf>,
    #[arg(long)]
    llm_timeout_secs: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    layer0_size: Option<usize>,
    #[arg(long)]
    layer1_size: Option<usize>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    precursor_fanin: Option<usize>,
    #[arg(long)]
    phasing_strength: Option<f64>,
    #[arg(long)]
    attention_contrast: Option<f64>,
    #[arg(long)]
    priming_sharpness: Option<f64>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    activation_noise: Option<f64>,
    #[arg(long)]
    phasing_noise: Option<f64>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    groups_per_neuron: Option<usize>,
    #[arg(long)]
    profile_size: Option<usize>,
}

fn required(v: Option<PathBuf>, cfg: &ConfigFile, key: &str) -> Result<PathBuf, CliError> {
    cfg.pick(v, key)?.ok_or_else(|| CliError::Validation(format!("--{key} is required")))
}

fn load_dataset(a: DataArgs, cfg: &ConfigFile) -> Result<ModelDataset, CliError> {
    let source_layer = cfg.pick(a.source_layer, "source-layer")?.unwrap_or(0);
    let dir = cfg.pick(a.data_dir, "data-dir")?;
    let mut paths = match &dir {
        Some(d) => DatasetPaths::in_dir(d),
        None => DatasetPaths::in_dir(Path::new("")),
    };
    let explicit = [
        (cfg.pick(a.profiles, "profiles")?, &mut paths.profiles),
        (cfg.pick(a.weights, "weights")?, &mut paths.weights),
        (cfg.pick(a.embeddings, "embeddings")?, &mut paths.embeddings),
    ];
    let mut missing = Vec::new();
    for ((given, slot), name) in explicit.into_iter().zip(["profiles", "weights", "embeddings"]) {
        match given {
            Some(p) => *slot = p,
            None if dir.is_none() => missing.push(format!("--{name}")),
            None => {}
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Validation(format!("missing {} (or give --data-dir)", missing.join(", "))));
    }
    if let Some(v) = cfg.pick(a.vocab, "vocab")? {
        paths.vocab = v;
    }
    let d = paths.load(source_layer)?;
    log::info!("loaded dataset {}", d.provenance());
    Ok(d)
}

fn run_config(a: &RunArgs, cfg: &ConfigFile) -> Result<RunConfig, CliError> {
    let d = RunConfig::default();
    let rc = RunConfig {
        k: cfg.pick(a.k, "k")?.unwrap_or(d.k),
        precursors: cfg.pick(a.precursors, "precursors")?.unwrap_or(d.precursors),
        clusters: cfg.pick(a.clusters, "clusters")?.unwrap_or(d.clusters),
        min_cluster: cfg.pick(a.min_cluster, "min-cluster")?.unwrap_or(d.min_cluster),
        method: cfg.pick(a.method, "method")?.unwrap_or(d.method),
        seed: cfg.pick(a.seed, "seed")?.unwrap_or(d.seed),
        workers: cfg.pick(a.workers, "workers")?,
        execution: if cfg.flag(a.sequential, "sequential")? { Execution::Sequential } else { Execution::Parallel },
    };
    rc.validate()?;
    Ok(rc)
}

fn run_analysis(dataset: &ModelDataset, run: &RunArgs, cfg: &ConfigFile, out: &Path) -> Result<Analysis, CliError> {
    let rc = run_config(run, cfg)?;
    let mut analysis = analyze(dataset, &rc)?;
    if rc.method == ClusterMethod::Llm {
        let endpoint = cfg
            .pick(run.llm_endpoint.clone(), "llm-endpoint")?
            .ok_or_else(|| CliError::Validation("--method llm needs --llm-endpoint".into()))?;
        let model = cfg.pick(run.llm_model.clone(), "llm-model")?.unwrap_or_default();
        let cache_path = cfg.pick(run.llm_cache.clone(), "llm-cache")?.unwrap_or_else(|| out.join("label_cache.json"));
        let mut lc = LabelerConfig::new(endpoint, model, &cache_path);
        if let Some(s) = cfg.pick(run.llm_timeout_secs, "llm-timeout-secs")? {
            lc.timeout = Duration::from_secs(s);
        }
        std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
        let cache = LabelCache::open(&cache_path)?;
        let transport = HttpTransport::new()?;
        let partitions: Vec<_> = analysis.partitions.values().cloned().collect();
        let surface = |id: u32| dataset.surface(id).map(str::to_owned).unwrap_or_else(|| id.to_string());
        let outcome = label_partitions(&partitions, &surface, &lc, &transport, &cache)?;
        if !outcome.failures.is_empty() {
            log::warn!("{} cluster(s) kept placeholder labels after labeling failures", outcome.failures.len());
        }
        log::info!("labeling used {} network call(s)", outcome.network_calls);
        analysis.relabel(outcome.partitions, ClusterMethod::Llm)?;
    }
    Ok(analysis)
}

fn synth_config(a: &SynthArgs, cfg: &ConfigFile) -> Result<SynthConfig, CliError> {
    let d = SynthConfig::default();
    let c = SynthConfig {
        seed: cfg.pick(a.seed, "seed")?.unwrap_or(d.seed),
        vocab_size: cfg.pick(a.vocab_size, "vocab-size")?.unwrap_or(d.vocab_size),
        layer0_size: cfg.pick(a.layer0_size, "layer0-size")?.unwrap_or(d.layer0_size),
        layer1_size: cfg.pick(a.layer1_size, "layer1-size")?.unwrap_or(d.layer1_size),
        embedding_dim: cfg.pick(a.embedding_dim, "embedding-dim")?.unwrap_or(d.embedding_dim),
        precursor_fanin: cfg.pick(a.precursor_fanin, "precursor-fanin")?.unwrap_or(d.precursor_fanin),
        phasing_strength: cfg.pick(a.phasing_strength, "phasing-strength")?.unwrap_or(d.phasing_strength),
        attention_contrast: cfg.pick(a.attention_contrast, "attention-contrast")?.unwrap_or(d.attention_contrast),
        priming_sharpness: cfg.pick(a.priming_sharpness, "priming-sharpness")?.unwrap_or(d.priming_sharpness),
        noise_scale: cfg.pick(a.noise_scale, "noise-scale")?.unwrap_or(d.noise_scale),
        activation_noise: cfg.pick(a.activation_noise, "activation-noise")?.unwrap_or(d.activation_noise),
        phasing_noise: cfg.pick(a.phasing_noise, "phasing-noise")?.unwrap_or(d.phasing_noise),
        group_size: cfg.pick(a.group_size, "group-size")?.unwrap_or(d.group_size),
        groups_per_neuron: cfg.pick(a.groups_per_neuron, "groups-per-neuron")?.unwrap_or(d.groups_per_neuron),
        profile_size: cfg.pick(a.profile_size, "profile-size")?.unwrap_or(d.profile_size),
    };
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Ingest { data, out } => {
            let out = required(out, &cfg, "out")?;
            let d = load_dataset(data, &cfg)?;
            d.write_to_dir(&out)?;
            println!("{} neurons, sha256 {}", d.profiles().len(), d.provenance().content_hash);
            println!("wrote {}", out.display());
        }
        Command::Synth(a) => {
            let out = required(a.out.clone(), &cfg, "out")?;
            let sc = synth_config(&a, &cfg)?;
            let (d, truth) = generate(&sc)?;
            write_synthetic(&d, &truth, &out)?;
            println!("wrote synthetic dataset to {} (sha256 {})", out.display(), d.provenance().content_hash);
        }
        Command::Analyze { data, run, out, paper_compare } => {
            let out = required(out, &cfg, "out")?;
            let reference = match cfg.pick(paper_compare, "paper-compare")? {
                None => None,
                Some(s) if s == "published" => Some(ReferenceValues::published()),
                Some(p) => Some(ReferenceValues::load(Path::new(&p))?),
            };
            let d = load_dataset(data, &cfg)?;
            let analysis = run_analysis(&d, &run, &cfg, &out)?;
            let files = export_report(&analysis, &out, reference.as_ref())?;
            for t in render_tables(&analysis.report) {
                println!("{t}");
            }
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Command::Export { data, run, out } => {
            let out = required(out, &cfg, "out")?;
            let d = load_dataset(data, &cfg)?;
            let analysis = run_analysis(&d, &run, &cfg, &out)?;
            let s = export_viewer_bundle(&d, &analysis, &out)?;
            println!("wrote bundle with {} neuron documents to {} (sha256 {})", s.documents, out.display(), s.hash);
        }
        Command::Serve { bundle, bind, cors_origin, static_dir } => {
            let bundle = required(bundle, &cfg, "bundle")?;
            let bind = cfg.pick(bind, "bind")?.unwrap_or_else(|| "127.0.0.1:8080".into());
            let addr = bind.parse().map_err(|e| CliError::Validation(format!("--bind {bind:?}: {e}")))?;
            let mut sc = ServerConfig::new(addr, bundle);
            sc.cors_origin = cfg.pick(cors_origin, "cors-origin")?;
            sc.static_dir = cfg.pick(static_dir, "static-dir")?;
            serve_blocking(sc)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("catres: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
