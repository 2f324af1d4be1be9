mod dataset;
mod eval;
mod report;

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};
use moodbridge_core::domain::SystemClock;
use moodbridge_service::{AssessmentService, ServiceConfig};

#[derive(Parser)]
#[command(name = "moodbridge", version, about = "Depression assessment workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Diagnostic report generation.
    #[command(subcommand)]
    Report(report::ReportCmd),
    /// Instruction dataset construction.
    #[command(subcommand)]
    Dataset(dataset::DatasetCmd),
    /// Classification metrics and fold assignment.
    #[command(subcommand)]
    Eval(eval::EvalCmd),
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `server.bind` from the config.
        #[arg(long)]
        bind: Option<String>,
    },
}

pub(crate) fn load_config(path: &PathBuf) -> anyhow::Result<ServiceConfig> {
    ServiceConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

async fn serve(config: PathBuf, bind: Option<String>) -> anyhow::Result<()> {
    let cfg = load_config(&config)?;
    let svc = AssessmentService::from_config(&cfg, Arc::new(SystemClock))?;
    let bind = bind.unwrap_or_else(|| cfg.server.bind.clone());
    moodbridge_service::http::serve(svc, &bind).await.with_context(|| format!("serving on {bind}"))
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Report(cmd) => report::run(cmd).await,
        Command::Dataset(cmd) => dataset::run(cmd).await,
        Command::Eval(cmd) => eval::run(cmd),
        Command::Serve { config, bind } => serve(config, bind).await,
    }
}
