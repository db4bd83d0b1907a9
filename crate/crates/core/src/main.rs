use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{ArgGroup, Parser};

use cgrepl::replication::ReplicationMode;
use cgrepl::scenario::run_scenario;
use cgrepl::serve::{serve, ServeConfig};
use cgrepl::simnet::SimDuration;
use cgrepl::world::{World, WorldConfig};

/// Simulated two-site block replication with consistency groups.
#[derive(Debug, Parser)]
#[command(version, group(ArgGroup::new("run").required(true).args(["serve", "scenario"])))]
struct Cli {
    /// Serve the HTTP gateway on 127.0.0.1:PORT.
    #[arg(long, value_name = "PORT")]
    serve: Option<u16>,
    /// Run a scenario file and exit with its status.
    #[arg(long, value_name = "FILE")]
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Inter-site round trip time.
    #[arg(long, value_name = "N", default_value_t = 100)]
    rtt_ms: u64,
    /// Replication mode for namespaces that do not choose one.
    #[arg(long, default_value = "grouped")]
    mode: ReplicationMode,
    /// Write the event trace here when the run ends.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
    /// Simulated milliseconds per wall-clock millisecond when serving; 0 runs
    /// only on request.
    #[arg(long, value_name = "RATIO", default_value_t = 1.0)]
    pace: f64,
    /// Write every volume image here when the run ends.
    #[arg(long, value_name = "DIR")]
    persist: Option<PathBuf>,
}

fn finish(world: &World, cli: &Cli) -> std::io::Result<()> {
    if let Some(path) = &cli.trace {
        let mut text = world.trace().join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
    }
    if let Some(dir) = &cli.persist {
        world.persist(dir)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<u8, String> {
    let cfg = WorldConfig {
        seed: cli.seed,
        rtt: SimDuration::from_ms(cli.rtt_ms),
        mode: cli.mode,
        trace: cli.trace.is_some(),
        ..WorldConfig::default()
    };
    if let Some(path) = &cli.scenario {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let (outcome, world) = run_scenario(&text, cfg);
        print!("{}", outcome.report_text());
        finish(&world, cli).map_err(|e| e.to_string())?;
        return Ok(outcome.exit_code as u8);
    }
    let port = cli.serve.expect("clap requires --serve or --scenario");
    if !(cli.pace >= 0.0 && cli.pace.is_finite()) {
        return Err(format!("--pace {} must be a non-negative number", cli.pace));
    }
    let world = Arc::new(tokio::sync::Mutex::new(World::new(cfg)));
    let serve_cfg = ServeConfig {
        pace_ratio: cli.pace,
        ..ServeConfig::default()
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async {
        eprintln!("serving on http://127.0.0.1:{port}");
        let shutdown = async {
            #[cfg(unix)]
            {
                use tokio::signal::unix::{signal, SignalKind};
                let mut term = signal(SignalKind::terminate()).expect("signal handler installs");
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            #[cfg(not(unix))]
            tokio::signal::ctrl_c().await.ok();
        };
        serve(port, world.clone(), serve_cfg, shutdown)
            .await
            .map_err(|e| format!("port {port}: {e}"))?;
        finish(&*world.lock().await, cli).map_err(|e| e.to_string())
    })?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
