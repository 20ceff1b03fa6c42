use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use huddle::load::{self, Sources};
use huddle::server::{self, AppState};
use huddle_core::config::ConfigErrors;
use huddle_core::domain::SystemClock;
use huddle_core::history::HistoryStore;
use huddle_core::llm::{HttpBackend, LlmBackend};
use huddle_core::replay::{self, ReplayOptions, DEFAULT_SETTLE_MS};

const EXIT_DIFF: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_BIND: u8 = 3;

#[derive(Parser)]
#[command(
    name = "huddle",
    version,
    about = "Chat rooms with cooperating conversational agents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Directory of `*.agent` files.
    #[arg(long)]
    agents: Option<PathBuf>,
    /// Activity plan file.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Server settings file.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn sources(&self) -> Sources {
        Sources {
            config: self.config.clone(),
            agents: self.agents.clone(),
            plan: self.plan.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the WebSocket server.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "./logs")]
        log_dir: PathBuf,
        /// Answer LLM requests from this script instead of over HTTP.
        #[arg(long)]
        mock_llm: Option<PathBuf>,
        #[command(flatten)]
        sources: ConfigArgs,
    },
    /// Replay a transcript on a virtual clock and compare with a golden file.
    Replay {
        transcript: PathBuf,
        golden: PathBuf,
        #[arg(long)]
        mock_llm: PathBuf,
        /// Also write the captured frames here.
        #[arg(long)]
        capture: Option<PathBuf>,
        /// Quiet time simulated after the last input.
        #[arg(long, default_value_t = DEFAULT_SETTLE_MS)]
        settle_ms: u64,
        #[command(flatten)]
        sources: ConfigArgs,
    },
}

fn report(errors: &[ConfigErrors]) {
    for e in errors {
        eprintln!("{e}");
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Serve {
            host,
            port,
            log_dir,
            mock_llm,
            sources,
        } => serve(host, port, log_dir, mock_llm, sources),
        Command::Replay {
            transcript,
            golden,
            mock_llm,
            capture,
            settle_ms,
            sources,
        } => run_replay(transcript, golden, mock_llm, capture, settle_ms, sources),
    }
}

fn serve(
    host: String,
    port: u16,
    log_dir: PathBuf,
    mock_llm: Option<PathBuf>,
    sources: ConfigArgs,
) -> ExitCode {
    let config = match load::pipeline(&sources.sources()) {
        Ok(config) => config,
        Err(errors) => {
            report(&errors);
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let backend: Arc<dyn LlmBackend> = match mock_llm {
        Some(path) => match load::mock_backend(&path) {
            Ok(mock) => Arc::new(mock),
            Err(e) => {
                eprintln!("{e}");
                return ExitCode::from(EXIT_CONFIG);
            }
        },
        None => Arc::new(HttpBackend::new()),
    };
    if let Err(e) = std::fs::create_dir_all(&log_dir) {
        eprintln!("{}: cannot create log directory: {e}", log_dir.display());
        return ExitCode::from(EXIT_CONFIG);
    }
    let summary = load::summary(&config);
    let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
    runtime.block_on(async move {
        let listener = match tokio::net::TcpListener::bind((host.as_str(), port)).await {
            Ok(l) => l,
            Err(e) => {
                eprintln!("cannot bind {host}:{port}: {e}");
                return ExitCode::from(EXIT_BIND);
            }
        };
        let shutdown = shutdown_signal();
        let addr = listener.local_addr().expect("bound address");
        println!("listening on {addr}");
        println!("{summary}");
        tracing::info!(%addr, %summary, log_dir = %log_dir.display(), "started");
        let state = AppState::new(
            Arc::new(config),
            Arc::new(HistoryStore::with_log_dir(log_dir)),
            backend,
            Arc::new(SystemClock),
        );
        match server::serve(listener, state, shutdown).await {
            Ok(()) => {
                tracing::info!("shut down");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("server error: {e}");
                ExitCode::FAILURE
            }
        }
    })
}

/// Registers the shutdown signals now and resolves when one arrives.
fn shutdown_signal() -> impl std::future::Future<Output = ()> {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).ok();
        let mut int = signal(SignalKind::interrupt()).ok();
        async move {
            let wait = |s: Option<tokio::signal::unix::Signal>| async move {
                match s {
                    Some(mut s) => {
                        s.recv().await;
                    }
                    None => std::future::pending::<()>().await,
                }
            };
            tokio::select! {
                _ = wait(term.take()) => {},
                _ = wait(int.take()) => {},
            }
        }
    }
    #[cfg(not(unix))]
    async {
        let _ = tokio::signal::ctrl_c().await;
    }
}

fn run_replay(
    transcript: PathBuf,
    golden: PathBuf,
    mock_llm: PathBuf,
    capture: Option<PathBuf>,
    settle_ms: u64,
    sources: ConfigArgs,
) -> ExitCode {
    let config = match load::pipeline(&sources.sources()) {
        Ok(config) => config,
        Err(errors) => {
            report(&errors);
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let backend = match load::mock_backend(&mock_llm) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let lines = match std::fs::read_to_string(&transcript)
        .map_err(|e| e.to_string())
        .and_then(|text| replay::parse_transcript(&text).map_err(|e| e.to_string()))
    {
        Ok(lines) => lines,
        Err(e) => {
            eprintln!("{}: {e}", transcript.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let golden_text = match std::fs::read_to_string(&golden) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("{}: {e}", golden.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let options = ReplayOptions {
        settle_ms,
        history: Arc::new(HistoryStore::in_memory()),
    };
    let captured = replay::run::<f64>(Arc::new(config), &backend, &lines, options).to_jsonl();
    if let Some(path) = capture {
        if let Err(e) = std::fs::write(&path, &captured) {
            eprintln!("{}: {e}", path.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match replay::compare(&captured, &golden_text) {
        Ok(()) => {
            println!(
                "replay matches golden ({} frames)",
                captured.lines().count()
            );
            ExitCode::SUCCESS
        }
        Err(e @ replay::CompareError::BadGolden { .. }) => {
            eprintln!("{}: {e}", golden.display());
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            println!("{e}");
            ExitCode::from(EXIT_DIFF)
        }
    }
}
