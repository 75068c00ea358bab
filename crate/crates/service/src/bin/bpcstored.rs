use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Context;
use bpcstore_core::pipeline::PipelineConfig;
use clap::Parser;

/// Serve a bpcstore store over HTTP/JSON.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Pipeline config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Store root, overriding the config.
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:7878")]
    bind: SocketAddr,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let args = Args::parse();
    let mut config = match &args.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(root) = args.store {
        config.store.root = root;
    }
    let root = config.store.root.clone();
    let state = bpcstore_service::AppState::new(config)?;
    let listener = tokio::net::TcpListener::bind(args.bind)
        .await
        .with_context(|| format!("binding {}", args.bind))?;
    tracing::info!(addr = %listener.local_addr()?, store = %root.display(), "listening");
    bpcstore_service::serve(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}
