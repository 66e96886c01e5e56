//! Operator entry points for the distributed metric-learning system.
//!
//! One binary, multiple roles: `gen`, `pairs`, `sequential`, `server`,
//! `worker`, `baseline`, `eval`. `--role <name>` is accepted as an alias for
//! the subcommand. Flag values override config-file values (`--config`, flat
//! `key=value` lines), which override built-in defaults. `DML_LOG` sets log
//! verbosity. Every run writes a manifest with the resolved configuration
//! into the output directory.

use std::collections::HashMap;
use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use dml_core::data::{
    generate_synthetic, load_dataset_with_dim, load_pairs, partition_pairs, sample_pairs,
    write_dataset, write_pairs, DatasetFormat, SyntheticSpec,
};
use dml_core::eval::{
    best_threshold, objective_trace, pair_distances, pr_curve_from_distances, read_trace,
    speedup, time_to_target, write_pr_curve_csv, write_speedup_csv,
};
use dml_core::metric::{init_factor, Dataset, Hyperparams, MetricFactor, PairSet};
use dml_core::model_io::{load_model, save_model};
use dml_core::protocol::tcp_endpoint;
use dml_core::server::{serve_tcp, ServerConfig};
use dml_core::worker::{run_worker, sequential_optimize, WorkerConfig};
use dml_core::{baseline, Error};

#[derive(Parser)]
#[command(name = "dml", version, about = "Distributed distance metric learning")]
struct Cli {
    /// Flat key=value config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    role: Role,
}

#[derive(Subcommand)]
enum Role {
    /// Generate a synthetic Gaussian-cluster dataset.
    Gen(GenArgs),
    /// Sample similar/dissimilar pairs from a labeled dataset.
    Pairs(PairsArgs),
    /// Single-machine SGD on the factorized objective.
    Sequential(TrainArgs),
    /// Run the parameter server.
    Server(ServerArgs),
    /// Run one worker process.
    Worker(WorkerArgs),
    /// Desk-scale projected-gradient solver for the constrained formulation.
    Baseline(BaselineArgs),
    /// Precision-recall / average-precision evaluation and speedup reports.
    Eval(EvalArgs),
}

#[derive(Args)]
struct CommonOut {
    /// Output directory (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long = "per-class")]
    per_class: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long = "cluster-spread")]
    cluster_spread: Option<f64>,
    #[arg(long = "center-spread")]
    center_spread: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output format: dense-csv or sparse-indexed.
    #[arg(long)]
    format: Option<String>,
    #[command(flatten)]
    out: CommonOut,
}

#[derive(Args)]
struct PairsArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long = "n-similar")]
    n_similar: Option<usize>,
    #[arg(long = "n-dissimilar")]
    n_dissimilar: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: CommonOut,
}

#[derive(Args)]
struct HyperArgs {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long = "batch-similar")]
    batch_similar: Option<usize>,
    #[arg(long = "batch-dissimilar")]
    batch_dissimilar: Option<usize>,
    #[arg(long = "lr-decay")]
    lr_decay: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[command(flatten)]
    out: CommonOut,
}

#[derive(Args)]
struct ServerArgs {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long = "server-addr")]
    server_addr: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "checkpoint-every")]
    checkpoint_every: Option<u64>,
    /// Disable parameter broadcasts (deterministic single-worker runs).
    #[arg(long = "no-broadcast")]
    no_broadcast: bool,
    #[command(flatten)]
    out: CommonOut,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long)]
    id: Option<u32>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long = "server-addr")]
    server_addr: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long = "time-budget-sec")]
    time_budget_sec: Option<f64>,
    #[arg(long = "no-adopt-broadcasts")]
    no_adopt_broadcasts: bool,
    #[command(flatten)]
    out: CommonOut,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// PGD step size.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[command(flatten)]
    out: CommonOut,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Worker trace logs as `workers:path` entries (repeatable), e.g.
    /// `--trace 1:out1/worker_0.csv --trace 2:out2/worker_0.csv`.
    #[arg(long = "trace")]
    traces: Vec<String>,
    /// Objective target for the speedup report; defaults to the final
    /// bucketed objective of the 1-worker trace.
    #[arg(long = "target-obj")]
    target_obj: Option<f64>,
    #[arg(long = "bucket-secs")]
    bucket_secs: Option<f64>,
    #[command(flatten)]
    out: CommonOut,
}

type ConfigMap = HashMap<String, String>;

fn load_config(path: &Path) -> Result<ConfigMap, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: lineno + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn cfg<T: std::str::FromStr>(
    flag: Option<T>,
    config: &ConfigMap,
    key: &str,
    default: T,
) -> Result<T, Error> {
    match flag {
        Some(v) => Ok(v),
        None => match config.get(key) {
            Some(raw) => raw.parse().map_err(|_| {
                Error::Config(format!("config key {key}: cannot parse {raw:?}"))
            }),
            None => Ok(default),
        },
    }
}

fn cfg_opt<T: std::str::FromStr>(
    flag: Option<T>,
    config: &ConfigMap,
    key: &str,
) -> Result<Option<T>, Error> {
    match flag {
        Some(v) => Ok(Some(v)),
        None => match config.get(key) {
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("config key {key}: cannot parse {raw:?}"))),
            None => Ok(None),
        },
    }
}

fn cfg_required<T: std::str::FromStr>(
    flag: Option<T>,
    config: &ConfigMap,
    key: &str,
) -> Result<T, Error> {
    match flag {
        Some(v) => Ok(v),
        None => match config.get(key) {
            Some(raw) => raw.parse().map_err(|_| {
                Error::Config(format!("config key {key}: cannot parse {raw:?}"))
            }),
            None => Err(Error::Config(format!("missing required option --{key}"))),
        },
    }
}

fn parse_format(name: &str) -> Result<DatasetFormat, Error> {
    match name {
        "dense-csv" => Ok(DatasetFormat::DenseCsv),
        "sparse-indexed" => Ok(DatasetFormat::SparseIndexed),
        other => Err(Error::Config(format!(
            "unknown dataset format {other:?} (expected dense-csv or sparse-indexed)"
        ))),
    }
}

fn resolve_hp(args: &HyperArgs, config: &ConfigMap) -> Result<Hyperparams, Error> {
    let defaults = Hyperparams::default();
    let hp = Hyperparams {
        lambda: cfg(args.lambda, config, "lambda", defaults.lambda)?,
        margin: cfg(args.margin, config, "margin", defaults.margin)?,
        learning_rate: cfg(args.eta, config, "eta", defaults.learning_rate)?,
        batch_similar: cfg(args.batch_similar, config, "batch-similar", defaults.batch_similar)?,
        batch_dissimilar: cfg(
            args.batch_dissimilar,
            config,
            "batch-dissimilar",
            defaults.batch_dissimilar,
        )?,
    };
    hp.validate()?;
    Ok(hp)
}

fn out_dir(args: &CommonOut, config: &ConfigMap) -> Result<PathBuf, Error> {
    let dir = cfg(args.out.clone(), config, "out", PathBuf::from("dml_out"))?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Resolved config + seeds + code version, for reproducibility.
fn write_manifest(dir: &Path, role: &str, entries: &[(&str, String)]) -> Result<(), Error> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.txt"))?);
    writeln!(w, "role={role}")?;
    writeln!(w, "version={}", env!("CARGO_PKG_VERSION"))?;
    for (key, value) in entries {
        writeln!(w, "{key}={value}")?;
    }
    w.flush()?;
    Ok(())
}

fn load_data(
    path: &Path,
    format: DatasetFormat,
    dim: Option<usize>,
) -> Result<Arc<Dataset>, Error> {
    Ok(Arc::new(load_dataset_with_dim(path, format, dim)?))
}

fn run_gen(args: GenArgs, config: &ConfigMap) -> Result<(), Error> {
    let spec = SyntheticSpec {
        n_classes: cfg(args.classes, config, "classes", 10)?,
        per_class: cfg(args.per_class, config, "per-class", 100)?,
        d: cfg(args.dim, config, "dim", 100)?,
        cluster_spread: cfg(args.cluster_spread, config, "cluster-spread", 1.0)?,
        center_spread: cfg(args.center_spread, config, "center-spread", 1.0)?,
        seed: cfg(args.seed, config, "seed", 0)?,
    };
    let format = parse_format(&cfg(args.format, config, "format", "dense-csv".into())?)?;
    let dir = out_dir(&args.out, config)?;
    let data = generate_synthetic(&spec)?;
    let path = dir.join(match format {
        DatasetFormat::DenseCsv => "dataset.csv",
        DatasetFormat::SparseIndexed => "dataset.sparse",
    });
    write_dataset(&path, &data, format)?;
    write_manifest(
        &dir,
        "gen",
        &[
            ("classes", spec.n_classes.to_string()),
            ("per-class", spec.per_class.to_string()),
            ("dim", spec.d.to_string()),
            ("cluster-spread", spec.cluster_spread.to_string()),
            ("center-spread", spec.center_spread.to_string()),
            ("seed", spec.seed.to_string()),
            ("dataset", path.display().to_string()),
        ],
    )?;
    println!("wrote {} samples to {}", data.n(), path.display());
    Ok(())
}

fn run_pairs(args: PairsArgs, config: &ConfigMap) -> Result<(), Error> {
    let data_path: PathBuf = cfg_required(args.data, config, "data")?;
    let format = parse_format(&cfg(args.format, config, "format", "dense-csv".into())?)?;
    let dim = cfg_opt(args.dim, config, "dim")?;
    let n_similar = cfg(args.n_similar, config, "n-similar", 10_000)?;
    let n_dissimilar = cfg(args.n_dissimilar, config, "n-dissimilar", 10_000)?;
    let seed = cfg(args.seed, config, "seed", 0)?;
    let dir = out_dir(&args.out, config)?;
    let data = load_data(&data_path, format, dim)?;
    let pairs = sample_pairs(&data, n_similar, n_dissimilar, seed)?;
    let path = dir.join("pairs.dmlp");
    write_pairs(&path, &pairs)?;
    write_manifest(
        &dir,
        "pairs",
        &[
            ("data", data_path.display().to_string()),
            ("n-similar", n_similar.to_string()),
            ("n-dissimilar", n_dissimilar.to_string()),
            ("seed", seed.to_string()),
            ("pairs", path.display().to_string()),
        ],
    )?;
    println!(
        "wrote {} similar + {} dissimilar pairs to {}",
        pairs.similar.len(),
        pairs.dissimilar.len(),
        path.display()
    );
    Ok(())
}

fn run_sequential(args: TrainArgs, config: &ConfigMap) -> Result<(), Error> {
    let data_path: PathBuf = cfg_required(args.data, config, "data")?;
    let pairs_path: PathBuf = cfg_required(args.pairs, config, "pairs")?;
    let format = parse_format(&cfg(args.format, config, "format", "dense-csv".into())?)?;
    let dim = cfg_opt(args.dim, config, "dim")?;
    let hp = resolve_hp(&args.hyper, config)?;
    let k = cfg_required(args.hyper.k, config, "k")?;
    let seed: u64 = cfg(args.seed, config, "seed", 0)?;
    let steps: u64 = cfg(args.steps, config, "steps", 1000)?;
    let dir = out_dir(&args.out, config)?;

    let data = load_data(&data_path, format, dim)?;
    let pairs = load_pairs(&pairs_path)?;
    let init = init_factor(k, data.d(), seed)?;
    let trace_path = dir.join("trace_sequential.csv");
    let mut trace = std::io::BufWriter::new(std::fs::File::create(&trace_path)?);
    let start = std::time::Instant::now();
    let model = sequential_optimize(
        &init,
        &data,
        &pairs,
        &hp,
        steps,
        seed,
        args.hyper.lr_decay,
        |step, obj| {
            let _ = writeln!(trace, "{},{:.6},{:.9}", step, start.elapsed().as_secs_f64(), obj);
        },
    )?;
    trace.flush()?;
    let model_path = dir.join("model.dmlm");
    save_model(&model_path, &model)?;
    write_manifest(
        &dir,
        "sequential",
        &[
            ("data", data_path.display().to_string()),
            ("pairs", pairs_path.display().to_string()),
            ("k", k.to_string()),
            ("lambda", hp.lambda.to_string()),
            ("margin", hp.margin.to_string()),
            ("eta", hp.learning_rate.to_string()),
            ("batch-similar", hp.batch_similar.to_string()),
            ("batch-dissimilar", hp.batch_dissimilar.to_string()),
            ("seed", seed.to_string()),
            ("steps", steps.to_string()),
            ("model", model_path.display().to_string()),
        ],
    )?;
    println!(
        "trained {}x{} model in {:.2}s, wrote {}",
        model.k,
        model.d,
        start.elapsed().as_secs_f64(),
        model_path.display()
    );
    Ok(())
}

fn run_server(args: ServerArgs, config: &ConfigMap) -> Result<(), Error> {
    let k = cfg_required(args.k, config, "k")?;
    let d = cfg_required(args.dim, config, "dim")?;
    let addr: String = cfg(args.server_addr, config, "server-addr", "127.0.0.1:7009".into())?;
    let workers = cfg(args.workers, config, "workers", 1)?;
    let seed: u64 = cfg(args.seed, config, "seed", 0)?;
    let checkpoint_every = cfg(args.checkpoint_every, config, "checkpoint-every", 10_000)?;
    let dir = out_dir(&args.out, config)?;

    let init = init_factor(k, d, seed)?;
    let model_path = dir.join("model.dmlm");
    let mut server_config = ServerConfig::new(init);
    server_config.broadcast = !args.no_broadcast;
    server_config.checkpoint_every = Some(checkpoint_every);
    server_config.checkpoint_path = Some(model_path.clone());
    server_config.progress_every = Some(100);

    write_manifest(
        &dir,
        "server",
        &[
            ("k", k.to_string()),
            ("dim", d.to_string()),
            ("server-addr", addr.clone()),
            ("workers", workers.to_string()),
            ("seed", seed.to_string()),
            ("checkpoint-every", checkpoint_every.to_string()),
            ("broadcast", (!args.no_broadcast).to_string()),
            ("model", model_path.display().to_string()),
        ],
    )?;
    let listener = TcpListener::bind(&addr)?;
    log::info!("server listening on {addr}, expecting {workers} workers");
    let report = serve_tcp(server_config, listener, workers)?;
    println!(
        "server applied {} updates, final model at {}",
        report.applied_updates,
        model_path.display()
    );
    Ok(())
}

fn connect_with_retry(addr: &str, attempts: u32, delay: Duration) -> Result<TcpStream, Error> {
    let mut last = None;
    for attempt in 0..attempts {
        match TcpStream::connect(addr) {
            Ok(stream) => return Ok(stream),
            Err(e) => {
                log::warn!("connect attempt {}/{attempts} to {addr} failed: {e}", attempt + 1);
                last = Some(e);
                std::thread::sleep(delay);
            }
        }
    }
    Err(last.map(Error::Io).unwrap_or(Error::Disconnected))
}

fn run_worker_role(args: WorkerArgs, config: &ConfigMap) -> Result<(), Error> {
    let id: u32 = cfg(args.id, config, "id", 0)?;
    let data_path: PathBuf = cfg_required(args.data, config, "data")?;
    let pairs_path: PathBuf = cfg_required(args.pairs, config, "pairs")?;
    let format = parse_format(&cfg(args.format, config, "format", "dense-csv".into())?)?;
    let dim = cfg_opt(args.dim, config, "dim")?;
    let hp = resolve_hp(&args.hyper, config)?;
    let k = cfg_required(args.hyper.k, config, "k")?;
    let workers = cfg(args.workers, config, "workers", 1)?;
    let addr: String = cfg(args.server_addr, config, "server-addr", "127.0.0.1:7009".into())?;
    let seed: u64 = cfg(args.seed, config, "seed", 0)?;
    let steps = cfg_opt(args.steps, config, "steps")?;
    let time_budget = cfg_opt(args.time_budget_sec, config, "time-budget-sec")?;
    let dir = out_dir(&args.out, config)?;
    if id as usize >= workers {
        return Err(Error::Config(format!("worker id {id} >= worker count {workers}")));
    }

    let data = load_data(&data_path, format, dim)?;
    let all_pairs = load_pairs(&pairs_path)?;
    // every worker derives the same partition from the shared seed and takes
    // its own shard; features are never sharded
    let shard = partition_pairs(&all_pairs, workers, seed)?
        .shards
        .swap_remove(id as usize);

    let init = init_factor(k, data.d(), seed)?;
    let mut worker_config = WorkerConfig::new(id, init, hp.clone(), seed.wrapping_add(id as u64 + 1), 0);
    worker_config.steps = steps;
    worker_config.time_budget = time_budget.map(Duration::from_secs_f64);
    worker_config.adopt_broadcasts = !args.no_adopt_broadcasts;
    worker_config.lr_decay = args.hyper.lr_decay;
    let trace_path = dir.join(format!("worker_{id}.csv"));
    worker_config.trace_path = Some(trace_path.clone());

    write_manifest(
        &dir,
        "worker",
        &[
            ("id", id.to_string()),
            ("data", data_path.display().to_string()),
            ("pairs", pairs_path.display().to_string()),
            ("k", k.to_string()),
            ("workers", workers.to_string()),
            ("server-addr", addr.clone()),
            ("seed", seed.to_string()),
            ("steps", steps.map(|s: u64| s.to_string()).unwrap_or_default()),
            (
                "time-budget-sec",
                time_budget.map(|t: f64| t.to_string()).unwrap_or_default(),
            ),
            ("trace", trace_path.display().to_string()),
        ],
    )?;
    let stream = connect_with_retry(&addr, 10, Duration::from_millis(500))?;
    let endpoint = tcp_endpoint(stream)?;
    let report = run_worker(worker_config, data, shard, endpoint)?;
    println!("worker {id} pushed {} updates", report.pushes);
    Ok(())
}

fn run_baseline(args: BaselineArgs, config: &ConfigMap) -> Result<(), Error> {
    let data_path: PathBuf = cfg_required(args.data, config, "data")?;
    let pairs_path: PathBuf = cfg_required(args.pairs, config, "pairs")?;
    let format = parse_format(&cfg(args.format, config, "format", "dense-csv".into())?)?;
    let dim = cfg_opt(args.dim, config, "dim")?;
    let step = cfg(args.eta, config, "eta", baseline::PgdConfig::default().step)?;
    let iters = cfg(args.steps, config, "steps", 500u64)? as usize;
    let dir = out_dir(&args.out, config)?;

    let data = load_data(&data_path, format, dim)?;
    let pairs = load_pairs(&pairs_path)?;
    let pgd = baseline::PgdConfig {
        step,
        iters,
        ..Default::default()
    };
    let m = baseline::pgd_solve(&data, &pairs, &pgd)?;
    // emit M in the shared matrix format (square shape, k = d)
    let d = m.d;
    let values: Vec<f32> = (0..d)
        .flat_map(|r| (0..d).map(move |c| (r, c)))
        .map(|(r, c)| m.values[(r, c)] as f32)
        .collect();
    let factor = MetricFactor::new(d, d, values)?;
    let model_path = dir.join("baseline.dmlm");
    save_model(&model_path, &factor)?;
    write_manifest(
        &dir,
        "baseline",
        &[
            ("data", data_path.display().to_string()),
            ("pairs", pairs_path.display().to_string()),
            ("eta", step.to_string()),
            ("steps", iters.to_string()),
            ("model", model_path.display().to_string()),
        ],
    )?;
    println!("baseline solver wrote {}", model_path.display());
    Ok(())
}

fn run_eval(args: EvalArgs, config: &ConfigMap) -> Result<(), Error> {
    let dir = out_dir(&args.out, config)?;
    let mut manifest: Vec<(&str, String)> = Vec::new();

    if let Some(model_path) = args.model.clone().or_else(|| config.get("model").map(PathBuf::from)) {
        let data_path: PathBuf = cfg_required(args.data, config, "data")?;
        let pairs_path: PathBuf = cfg_required(args.pairs, config, "pairs")?;
        let format = parse_format(&cfg(args.format, config, "format", "dense-csv".into())?)?;
        let dim = cfg_opt(args.dim, config, "dim")?;
        let model = load_model(&model_path)?;
        let data = load_data(&data_path, format, dim)?;
        let pairs: PairSet = load_pairs(&pairs_path)?;
        let (sim, dis) = pair_distances(&model, &data, &pairs)?;
        let curve = pr_curve_from_distances(&sim, &dis)?;
        let (threshold, accuracy) = best_threshold(&sim, &dis);
        let curve_path = dir.join("pr_curve.csv");
        write_pr_curve_csv(&curve_path, &curve)?;
        println!("average_precision={:.6}", curve.average_precision);
        println!("best_threshold={threshold:.6} accuracy={accuracy:.6}");
        manifest.push(("model", model_path.display().to_string()));
        manifest.push(("pairs", pairs_path.display().to_string()));
        manifest.push(("pr-curve", curve_path.display().to_string()));
        manifest.push(("average-precision", curve.average_precision.to_string()));
    }

    if !args.traces.is_empty() {
        let bucket = cfg(args.bucket_secs, config, "bucket-secs", 0.5)?;
        let mut series: Vec<(usize, Vec<(f64, f64)>)> = Vec::new();
        for entry in &args.traces {
            let (n, path) = entry.split_once(':').ok_or_else(|| {
                Error::Config(format!("--trace expects workers:path, got {entry:?}"))
            })?;
            let n: usize = n
                .parse()
                .map_err(|_| Error::Config(format!("bad worker count in {entry:?}")))?;
            let trace = read_trace(Path::new(path))?;
            series.push((n, objective_trace(&[trace], bucket)?));
        }
        let baseline_series = &series
            .iter()
            .find(|(n, _)| *n == 1)
            .ok_or_else(|| Error::Config("speedup needs a 1-worker trace".into()))?
            .1;
        let target = match args.target_obj.or_else(|| {
            config.get("target-obj").and_then(|raw| raw.parse().ok())
        }) {
            Some(t) => t,
            None => {
                baseline_series
                    .last()
                    .ok_or_else(|| Error::Config("empty 1-worker trace".into()))?
                    .1
            }
        };
        let times: Vec<(usize, Option<f64>)> = series
            .iter()
            .map(|(n, s)| (*n, time_to_target(s, target)))
            .collect();
        let report = speedup(&times)?;
        let speedup_path = dir.join("speedup.csv");
        write_speedup_csv(&speedup_path, &report)?;
        for (n, factor) in &report.factors {
            println!("workers={n} factor={factor:.3}");
        }
        manifest.push(("target-obj", target.to_string()));
        manifest.push(("speedup", speedup_path.display().to_string()));
    }

    if manifest.is_empty() {
        return Err(Error::Config(
            "eval needs --model (PR curve) and/or --trace entries (speedup)".into(),
        ));
    }
    write_manifest(&dir, "eval", &manifest)?;
    Ok(())
}

/// `--role <name>` anywhere in argv is rewritten to a leading subcommand.
fn rewrite_role_flag(mut argv: Vec<String>) -> Vec<String> {
    if let Some(pos) = argv.iter().position(|a| a == "--role") {
        if pos + 1 < argv.len() {
            let role = argv.remove(pos + 1);
            argv.remove(pos);
            argv.insert(1, role);
        }
    }
    argv
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DML_LOG", "warn")).init();
    let argv = rewrite_role_flag(std::env::args().collect());
    let cli = Cli::parse_from(argv);
    let config = match &cli.config {
        Some(path) => match load_config(path) {
            Ok(map) => map,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => ConfigMap::new(),
    };
    let result = match cli.role {
        Role::Gen(args) => run_gen(args, &config),
        Role::Pairs(args) => run_pairs(args, &config),
        Role::Sequential(args) => run_sequential(args, &config),
        Role::Server(args) => run_server(args, &config),
        Role::Worker(args) => run_worker_role(args, &config),
        Role::Baseline(args) => run_baseline(args, &config),
        Role::Eval(args) => run_eval(args, &config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
