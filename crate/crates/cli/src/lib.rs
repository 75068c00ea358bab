//! `bpcstore` command line. Every subcommand is a request to the service;
//! without `--server` an in-process server is started on a loopback port
//! for the duration of the command.
//!
//! Output is `key=value` lines on stdout. Exit codes: 0 success, 1 usage
//! error, 2 data error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use bpcstore_client::{Client, ClientError};
use bpcstore_core::align::{ResampleMethod, SilenceMode};
use bpcstore_core::api::*;
use bpcstore_core::catalog::{AssetQuery, ScaleInputs};
use bpcstore_core::pipeline::{CorpusSpec, PipelineConfig, RandomCorpus, MANIFEST_FILE};
use bpcstore_core::report::Report;
use chrono::{DateTime, NaiveDate, TimeZone, Utc};
use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

pub const DEFAULT_CONFIG: &str = "bpcstore.toml";

#[derive(Parser, Debug)]
#[command(name = "bpcstore", version, about = "Broadcast-audio feature datastore")]
struct Cli {
    /// Pipeline config file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Store root, overriding the config.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// Service URL. Without it an in-process server is used.
    #[arg(long, global = true)]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Filter {
    #[arg(long)]
    zone: Option<String>,
    /// Inclusive start, `YYYY-MM-DD` or RFC 3339.
    #[arg(long)]
    from: Option<String>,
    /// Exclusive end, `YYYY-MM-DD` or RFC 3339.
    #[arg(long)]
    to: Option<String>,
    #[arg(long)]
    min_duration: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
struct Selection {
    #[command(flatten)]
    filter: Filter,
    /// drop | mask | keep
    #[arg(long)]
    silence: Option<SilenceMode>,
    /// nearest | linear
    #[arg(long)]
    method: Option<ResampleMethod>,
    /// Grid period in seconds.
    #[arg(long)]
    grid: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create the store (and the config file if it does not exist).
    Init,
    /// Register every WAV file in a directory.
    Ingest { dir: PathBuf },
    /// Run VAD and feature extraction on the selected assets.
    Process {
        #[command(flatten)]
        filter: Filter,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Summarize the aligned feature matrix.
    Matrix {
        #[command(flatten)]
        selection: Selection,
    },
    /// Principal components of the standardized matrix.
    Pca {
        #[command(flatten)]
        selection: Selection,
        #[arg(short)]
        k: Option<usize>,
    },
    /// k-means on the standardized matrix.
    Cluster {
        #[command(flatten)]
        selection: Selection,
        #[arg(short)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write windowed tensors of the matrix.
    Export {
        #[command(flatten)]
        selection: Selection,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        hop: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Catalog and referenced-file sizes.
    Stats,
    /// Archive-scale data point arithmetic.
    Estimate {
        #[arg(long, default_value_t = 160_000)]
        files: u64,
        #[arg(long, default_value_t = 30.0)]
        minutes: f64,
        #[arg(long, default_value_t = 3.5)]
        mb: f64,
        #[arg(long, default_value_t = 22_050)]
        rate: u64,
        #[arg(long, default_value_t = 26)]
        lld_features: u64,
        #[arg(long, default_value_t = 183_000)]
        lld_frames: u64,
        #[arg(long, default_value_t = 3)]
        praat_features: u64,
        #[arg(long, default_value_t = 230_000)]
        praat_frames: u64,
    },
    /// Write a synthetic corpus from a TOML spec or random parameters.
    Synth {
        /// Corpus spec (TOML). Without it a random corpus is generated.
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        files: usize,
        #[arg(long, default_value_t = 60.0)]
        duration: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Every n-th file is pure background noise.
        #[arg(long, default_value_t = 0)]
        silent_every: usize,
    },
}

/// Failure after argument parsing; always exit code 2.
#[derive(Debug)]
struct DataError {
    kind: String,
    message: String,
}

impl From<ClientError> for DataError {
    fn from(e: ClientError) -> Self {
        Self {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

impl From<anyhow::Error> for DataError {
    fn from(e: anyhow::Error) -> Self {
        Self {
            kind: "Local".into(),
            message: format!("{e:#}"),
        }
    }
}

/// Runs with stdout as the report sink.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    run_command_to(argv, &mut lock)
}

/// Runs `argv` (program name first) and writes the report to `out`.
pub fn run_command_to<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(out, "{}", e.render());
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let result = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .context("starting runtime")
        .map_err(DataError::from)
        .and_then(|rt| rt.block_on(execute(cli)));
    match result {
        Ok(report) => {
            let _ = write!(out, "{report}");
            EXIT_OK
        }
        Err(e) => {
            let mut r = Report::new();
            r.push("status", "error").push("error_kind", &e.kind).push("error", &e.message);
            let _ = write!(out, "{r}");
            EXIT_DATA
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<(PipelineConfig, Option<PathBuf>)> {
    let mut cfg = match &cli.config {
        Some(p) if p.exists() => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        Some(p) if !matches!(cli.command, Command::Init) => bail!("config file {} does not exist (run init)", p.display()),
        _ => PipelineConfig::default(),
    };
    if let Some(root) = &cli.store {
        cfg.store.root = root.clone();
    }
    cfg.store.root = std::path::absolute(&cfg.store.root)?;
    Ok((cfg, cli.config.clone()))
}

async fn connect(cli: &Cli, cfg: &PipelineConfig) -> anyhow::Result<Client> {
    if let Some(url) = &cli.server {
        return Ok(Client::new(url.clone()));
    }
    let state = bpcstore_service::AppState::new(cfg.clone())?;
    let (addr, _handle) = bpcstore_service::spawn_local(state).await?;
    Ok(Client::new(format!("http://{addr}")))
}

fn parse_time(s: &str, flag: &str) -> anyhow::Result<DateTime<Utc>> {
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(Utc.from_utc_datetime(&d.and_hms_opt(0, 0, 0).expect("midnight")));
    }
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .with_context(|| format!("--{flag} {s:?} is neither YYYY-MM-DD nor RFC 3339"))
}

fn build_query(f: &Filter) -> anyhow::Result<AssetQuery> {
    let from = f.from.as_deref().map(|s| parse_time(s, "from")).transpose()?;
    let to = f.to.as_deref().map(|s| parse_time(s, "to")).transpose()?;
    let date_range = match (from, to) {
        (None, None) => None,
        (from, to) => Some((
            from.unwrap_or_else(|| Utc.with_ymd_and_hms(1, 1, 1, 0, 0, 0).unwrap()),
            to.unwrap_or_else(|| Utc.with_ymd_and_hms(9999, 12, 31, 23, 59, 59).unwrap()),
        )),
    };
    Ok(AssetQuery {
        zone: f.zone.clone(),
        date_range,
        min_duration_s: f.min_duration,
    })
}

fn build_selection(s: &Selection) -> anyhow::Result<MatrixSelection> {
    Ok(MatrixSelection {
        query: build_query(&s.filter)?,
        silence: s.silence,
        method: s.method,
        grid_period_s: s.grid,
    })
}

fn absolute(p: &Path) -> anyhow::Result<PathBuf> {
    Ok(std::path::absolute(p)?)
}

async fn execute(cli: Cli) -> Result<Report, DataError> {
    let (cfg, config_path) = load_config(&cli)?;
    let client = connect(&cli, &cfg).await?;
    let mut r = Report::new();
    match &cli.command {
        Command::Init => {
            let path = config_path.unwrap_or_else(|| PathBuf::from(DEFAULT_CONFIG));
            if !path.exists() {
                let mut written = cfg.clone();
                if cli.store.is_none() {
                    written.store.root = PipelineConfig::default().store.root;
                }
                std::fs::write(&path, written.to_toml()).with_context(|| format!("writing {}", path.display()))?;
                r.push("config_written", "true");
            } else {
                r.push("config_written", "false");
            }
            let init = client.init().await?;
            r.push("config", path.display())
                .push("store_root", init.store_root.display())
                .push("n_assets", init.stats.n_assets);
        }
        Command::Ingest { dir } => {
            let out = client.ingest(&IngestRequest { dir: absolute(dir)? }).await?;
            r.push("registered", out.registered.len()).push("failed", out.failed.len());
            r.push("n_samples_total", out.registered.iter().map(|a| a.n_samples).sum::<u64>());
            for a in &out.registered {
                let p = format!("asset.{}", a.asset_id);
                r.push(format!("{p}.file"), a.metadata.source_name.as_str())
                    .push(format!("{p}.zone"), a.metadata.zone.as_str())
                    .push(format!("{p}.start"), a.metadata.start_datetime.to_rfc3339())
                    .push(format!("{p}.sample_rate_hz"), a.sample_rate_hz)
                    .push(format!("{p}.n_samples"), a.n_samples)
                    .push(format!("{p}.duration_s"), a.duration_s);
            }
            for f in &out.failed {
                r.push("failure", format!("{} {} {}", f.file.display(), f.kind, f.message));
            }
        }
        Command::Process { filter, workers } => {
            let out = client
                .process(&ProcessRequest {
                    query: build_query(filter)?,
                    workers: *workers,
                })
                .await?;
            r.push("processed", out.assets.len());
            r.push("tracks_total", out.assets.iter().map(|a| a.tracks.len()).sum::<usize>());
            for a in &out.assets {
                let p = format!("asset.{}", a.asset_id);
                r.push(format!("{p}.tracks"), a.tracks.len())
                    .push(format!("{p}.segments"), a.n_segments)
                    .push(format!("{p}.coverage"), format!("{:.4}", a.coverage));
            }
        }
        Command::Matrix { selection } => {
            let m = client.matrix(&build_selection(selection)?).await?;
            r.push("n_assets", m.n_assets)
                .push("n_rows", m.n_rows)
                .push("n_columns", m.columns.len())
                .push("grid_period_s", m.grid_period_s)
                .push("silence", m.silence)
                .push("valid_fraction", format!("{:.6}", m.valid_fraction));
            let names: Vec<&str> = m.columns.iter().map(|c| c.name.as_str()).collect();
            r.push_list("columns", &names);
            for c in &m.columns {
                r.push(format!("column.{}.valid_fraction", c.name), format!("{:.6}", c.valid_fraction));
                if let Some(mean) = c.mean {
                    r.push(format!("column.{}.mean", c.name), format!("{mean:.6}"));
                }
            }
        }
        Command::Pca { selection, k } => {
            let out = client
                .pca(&PcaRequest {
                    selection: build_selection(selection)?,
                    k: *k,
                })
                .await?;
            let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>();
            r.push("n_rows", out.n_rows)
                .push("k", out.model.k())
                .push("total_variance", format!("{:.6}", out.model.total_variance))
                .push_list("columns", &out.model.columns)
                .push_list("eigenvalues", &fmt(&out.model.eigenvalues))
                .push_list("explained_variance_ratio", &fmt(&out.model.explained_variance_ratio));
            for (i, c) in out.model.components.iter().enumerate() {
                r.push_list(format!("component.{}", i + 1), &fmt(c));
            }
        }
        Command::Cluster { selection, k, seed } => {
            let out = client
                .cluster(&ClusterRequest {
                    selection: build_selection(selection)?,
                    k: *k,
                    seed: *seed,
                })
                .await?;
            r.push("n_rows", out.n_rows)
                .push("k", out.clustering.k())
                .push("inertia", format!("{:.6}", out.clustering.inertia))
                .push("iterations", out.clustering.iterations)
                .push_list("cluster_sizes", &out.cluster_sizes);
            if let Some(s) = out.silhouette {
                r.push("silhouette", format!("{s:.4}"));
            }
        }
        Command::Export {
            selection,
            window,
            hop,
            out,
        } => {
            let resp = client
                .export(&ExportRequest {
                    selection: build_selection(selection)?,
                    window_frames: *window,
                    hop_frames: *hop,
                    path: absolute(out)?,
                })
                .await?;
            r.push("path", resp.path.display())
                .push("n_windows", resp.n_windows)
                .push("window_frames", resp.window_frames)
                .push("n_features", resp.n_features)
                .push("bytes", resp.bytes);
        }
        Command::Stats => {
            let s = client.stats().await?;
            let ratio = if s.referenced_bytes == 0 {
                0.0
            } else {
                s.catalog_bytes as f64 / s.referenced_bytes as f64
            };
            r.push("n_assets", s.n_assets)
                .push("n_tracks", s.n_tracks)
                .push("catalog_bytes", s.catalog_bytes)
                .push("referenced_bytes", s.referenced_bytes)
                .push("catalog_ratio", format!("{ratio:.6}"));
        }
        Command::Estimate {
            files,
            minutes,
            mb,
            rate,
            lld_features,
            lld_frames,
            praat_features,
            praat_frames,
        } => {
            let e = client
                .estimate(&ScaleInputs {
                    n_files: *files,
                    minutes_per_file: *minutes,
                    mb_per_file: *mb,
                    sample_rate_hz: *rate,
                    n_lld_features: *lld_features,
                    lld_frames_per_feature: *lld_frames,
                    n_praat_features: *praat_features,
                    praat_frames_per_feature: *praat_frames,
                })
                .await?;
            r.push("n_files", e.n_files)
                .push("minutes_total", e.minutes_total)
                .push("raw_bytes", format!("{:e}", e.raw_bytes))
                .push("raw_points", format!("{:e}", e.raw_points))
                .push("lld_points", format!("{:e}", e.lld_points))
                .push("praat_points", format!("{:e}", e.praat_points))
                .push("total_points", format!("{:e}", e.total_points));
        }
        Command::Synth {
            spec,
            out,
            files,
            duration,
            seed,
            silent_every,
        } => {
            let spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str::<CorpusSpec>(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => {
                    let mut params = RandomCorpus::new(*files, *duration, *seed);
                    params.silent_every = *silent_every;
                    CorpusSpec::random(&params)
                }
            };
            let out_dir = absolute(out)?;
            let manifest = client
                .synth(&SynthRequest {
                    spec,
                    out_dir: out_dir.clone(),
                })
                .await?;
            r.push("out_dir", out_dir.display())
                .push("manifest", out_dir.join(MANIFEST_FILE).display())
                .push("n_files", manifest.entries.len())
                .push("n_bursts", manifest.entries.iter().map(|e| e.bursts.len()).sum::<usize>());
            for (i, e) in manifest.entries.iter().enumerate() {
                r.push(format!("file.{}", i + 1), e.file_name.as_str());
            }
        }
    }
    Ok(r)
}
