use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use ssc_core::audit::AuditRecord;
use ssc_gateway::api::router;
use ssc_gateway::client::{ApiClient, HttpClient};
use ssc_gateway::harness::demo::seed_demo;
use ssc_gateway::harness::scenario::{run_in_process, Driver, Scenario};
use ssc_gateway::{GatewayConfig, Ssc};

#[derive(Parser)]
#[command(name = "ssc", about = "Shared services center gateway")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start the gateway.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the listen address in the config.
        #[arg(long)]
        listen: Option<String>,
    },
    Scenario {
        #[command(subcommand)]
        command: ScenarioCommand,
    },
    /// Spawn simulated administrations with a standard service set.
    Seed {
        #[arg(long)]
        admins: usize,
        #[arg(long, default_value_t = 0.8)]
        participation: f64,
        /// Seed a running gateway instead of a throwaway in-process one.
        #[arg(long)]
        gateway: Option<String>,
    },
    Audit {
        #[command(subcommand)]
        command: AuditCommand,
    },
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// Run a scenario script and check its assertions.
    Run {
        file: PathBuf,
        /// Drive a running gateway (started with this scenario) over HTTP.
        #[arg(long)]
        gateway: Option<String>,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum AuditCommand {
    /// Print every audit record carrying a correlation id.
    Trace {
        correlation: String,
        #[arg(long, conflicts_with = "config")]
        gateway: Option<String>,
        /// Read the trace straight from a gateway's storage.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn throwaway_config(dir: &tempfile::TempDir) -> GatewayConfig {
    GatewayConfig {
        storage: dir.path().to_path_buf(),
        ..GatewayConfig::default()
    }
}

fn run(cli: Cli) -> Result<bool, String> {
    match cli.command {
        Command::Serve { config, listen } => {
            let mut cfg = GatewayConfig::load(&config).map_err(|e| e.to_string())?;
            if let Some(l) = listen {
                cfg.listen = l;
            }
            serve(cfg)
        }
        Command::Scenario {
            command: ScenarioCommand::Run { file, gateway, report },
        } => {
            let scenario = Scenario::load(&file).map_err(|e| e.to_string())?;
            let result = match gateway {
                Some(url) => {
                    let client = HttpClient::new(url, Duration::from_secs(30));
                    Driver::new(&client, &scenario).run()
                }
                None => {
                    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
                    run_in_process(&scenario, throwaway_config(&dir)).map_err(|e| e.to_string())?
                }
            };
            for line in result.lines() {
                println!("{line}");
            }
            if let Some(path) = report {
                let json = serde_json::to_vec_pretty(&result).map_err(|e| e.to_string())?;
                std::fs::write(&path, json).map_err(|e| format!("{}: {e}", path.display()))?;
            }
            Ok(result.passed)
        }
        Command::Seed {
            admins,
            participation,
            gateway,
        } => {
            let health: serde_json::Value = match gateway {
                Some(url) => HttpClient::new(url, Duration::from_secs(60))
                    .post_json("/demo/seed", None, &serde_json::json!({"admins": admins, "participation": participation}))?
                    .ok_json()?,
                None => {
                    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
                    let ssc = Ssc::open(throwaway_config(&dir)).map_err(|e| e.to_string())?;
                    seed_demo(&ssc, admins, participation, 0).map_err(|e| e.to_string())?;
                    serde_json::to_value(ssc.health()).map_err(|e| e.to_string())?
                }
            };
            let online = health["online_admins"].as_array().cloned().unwrap_or_default();
            println!("{} administrations online", online.len());
            for a in online {
                println!("  {}", a.as_str().unwrap_or_default());
            }
            Ok(true)
        }
        Command::Audit {
            command: AuditCommand::Trace {
                correlation,
                gateway,
                config,
            },
        } => {
            let records: Vec<AuditRecord> = match (gateway, config) {
                (Some(url), _) => HttpClient::new(url, Duration::from_secs(30))
                    .get(&format!("/audit/trace/{correlation}"), None)?
                    .ok_json()?,
                (None, Some(path)) => {
                    let mut cfg = GatewayConfig::load(&path).map_err(|e| e.to_string())?;
                    cfg.scenario = None;
                    Ssc::open(cfg).map_err(|e| e.to_string())?.audit.trace(&correlation)
                }
                (None, None) => return Err("pass --gateway or --config".into()),
            };
            let mut out = std::io::stdout().lock();
            for r in &records {
                writeln!(out, "{}", serde_json::to_string(r).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            }
            Ok(true)
        }
    }
}

fn serve(cfg: GatewayConfig) -> Result<bool, String> {
    let listen = cfg.listen.clone();
    let ssc = Ssc::open(cfg).map_err(|e| e.to_string())?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&listen)
            .await
            .map_err(|e| format!("bind {listen}: {e}"))?;
        let addr = listener.local_addr().map_err(|e| e.to_string())?;
        println!("listening on http://{addr}");
        std::io::stdout().flush().ok();
        axum::serve(listener, router(ssc))
            .with_graceful_shutdown(async {
                tokio::signal::ctrl_c().await.ok();
            })
            .await
            .map_err(|e| e.to_string())?;
        Ok(true)
    })
}
