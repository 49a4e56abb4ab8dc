use std::path::PathBuf;
use std::sync::Arc;

use clap::Parser;
use deltaserve::{Engine, ServerConfig};
use tracing_subscriber::EnvFilter;

/// OpenAI-compatible inference server over the deterministic mock model.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    /// TOML config file.
    #[arg(long, env = "DELTASERVE_CONFIG")]
    config: Option<PathBuf>,
    /// Listen address; overrides the config file.
    #[arg(long, env = "DELTASERVE_LISTEN")]
    listen: Option<String>,
    /// Start with every optimisation disabled.
    #[arg(long)]
    baseline: bool,
    /// Print the effective config as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let args = Args::parse();
    let mut cfg = ServerConfig::load(args.config.as_deref())?;
    if let Some(l) = args.listen {
        cfg.listen = l;
    }
    if args.baseline {
        cfg.engine.features = deltaserve::Features::baseline();
    }
    if args.print_config {
        println!("{}", toml::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let engine = Arc::new(Engine::new(cfg.engine.clone())?);
    let listener = tokio::net::TcpListener::bind(&cfg.listen).await?;
    tracing::info!(addr = %listener.local_addr()?, features = ?engine.features(), "listening");
    deltaserve::server::serve(engine, listener, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}
