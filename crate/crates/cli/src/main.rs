//! `communityfl`: run simulations, start a coordinator or client over TCP,
//! inspect run artifacts.

use std::fmt;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use communityfl::artifacts::{self, CohortTree, ModeComparison, RoundRow, RunOutcome, RunSummary};
use communityfl::client::{run_socket_client, ClientDataFile, ClientNode, SocketClientOptions};
use communityfl::community::ParticipantMetadata;
use communityfl::netproto::schema::protocol_schema_text;
use communityfl::orchestrator::server::{serve, ServeConfig};
use communityfl::orchestrator::{Mode, RoundReport};
use communityfl::scenarios::{builtin, builtin_names, ScenarioSpec};
use communityfl::simulation::{reseed, socket_bundle, RunStatus, Simulation};

const EXIT_CONFIG: u8 = 2;
const EXIT_ABORTED: u8 = 3;

#[derive(Parser)]
#[command(name = "communityfl", version, about = "Community-based federated learning simulator and runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario in-process and write artifacts.
    Simulate {
        /// Scenario JSON file or builtin name.
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value = "cohort")]
        mode: Mode,
        /// Overrides the scenario and scheduler seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Skip the comparison run in the other mode.
        #[arg(long)]
        no_compare: bool,
    },
    /// Run a coordinator over TCP.
    Serve {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        config: PathBuf,
        /// Artifact directory, rewritten after every iteration.
        #[arg(long, default_value = "serve-out")]
        out: PathBuf,
    },
    /// Run a client over TCP.
    Client {
        #[arg(long)]
        connect: String,
        /// Client data file (dataset, tasks, split seed, resources).
        #[arg(long)]
        data: PathBuf,
        /// Participant metadata file.
        #[arg(long)]
        metadata: PathBuf,
        /// Seconds to wait for a reply or ack before retrying.
        #[arg(long, default_value_t = 30)]
        reply_timeout: u64,
    },
    /// Print the community, population and cohort tree of a run.
    Inspect {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write coordinator and client files for running a scenario over TCP.
    Export {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value = "cohort")]
        mode: Mode,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// List builtin scenarios, or print one as JSON.
    Scenarios {
        #[arg(long)]
        show: Option<String>,
    },
    /// Print the wire protocol JSON schema.
    Schema {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// An error in user-supplied configuration (exit code 2).
#[derive(Debug)]
struct ConfigError(String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn load_scenario(arg: &str, seed: Option<u64>) -> Result<ScenarioSpec> {
    let path = Path::new(arg);
    let mut spec = if path.is_file() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        ScenarioSpec::from_json(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?
    } else {
        builtin(arg).map_err(|_| {
            config_error(format!("{arg:?} is neither a scenario file nor a builtin ({})", builtin_names().join(", ")))
        })?
    };
    if let Some(seed) = seed {
        reseed(&mut spec, seed);
    }
    spec.validate().map_err(|e| config_error(e.to_string()))?;
    Ok(spec)
}

fn elapsed_ms(start: Instant) -> u64 {
    u64::try_from(start.elapsed().as_millis()).unwrap_or(u64::MAX)
}

fn cmd_simulate(scenario: &str, mode: Mode, seed: Option<u64>, out: &Path, no_compare: bool) -> Result<ExitCode> {
    let spec = load_scenario(scenario, seed)?;
    let start = Instant::now();
    let mut sim = Simulation::new(spec.clone(), mode).map_err(|e| config_error(e.to_string()))?;
    let status = sim.run()?;
    let wall = elapsed_ms(start);
    let outcome = match status {
        RunStatus::Completed => RunOutcome::Completed,
        RunStatus::Aborted => RunOutcome::Aborted,
    };
    let mut summary = RunSummary::from_simulation(&sim, outcome, wall);
    if !no_compare {
        let mut other = Simulation::new(spec, mode.other())?;
        other.run()?;
        let mine = summary.mean_client_accuracy.unwrap_or(f64::NAN);
        let theirs = other.accuracy().last().map_or(f64::NAN, |a| a.mean_client);
        summary.comparison = Some(match mode {
            Mode::Cohort => ModeComparison::new(mine, theirs),
            Mode::Global => ModeComparison::new(theirs, mine),
        });
    }
    let tree = CohortTree::from_coordinator(sim.coordinator());
    artifacts::write_all(out, sim.reports(), &tree, &summary)?;

    println!(
        "scenario {} seed {} mode {}: {} rounds, {:?}",
        summary.scenario, summary.seed, mode, summary.rounds_executed, outcome
    );
    if let Some(acc) = summary.mean_client_accuracy {
        println!("mean client accuracy {acc:.4}");
    }
    if let Some(c) = summary.comparison {
        println!(
            "cohort {:.4} vs global {:.4} ({:+.2} points)",
            c.cohort_mean_client_accuracy,
            c.global_mean_client_accuracy,
            100.0 * c.difference
        );
    }
    println!("artifacts in {}", out.display());
    Ok(match status {
        RunStatus::Completed => ExitCode::SUCCESS,
        RunStatus::Aborted => ExitCode::from(EXIT_ABORTED),
    })
}

fn write_serve_artifacts(
    out: &Path,
    config: &ServeConfig,
    coordinator: &communityfl::orchestrator::Coordinator,
    reports: &[RoundReport],
    iterations: u64,
    outcome: RunOutcome,
    start: Instant,
) -> Result<()> {
    let summary = RunSummary::from_reports(
        "serve",
        config.scheduler.seed,
        coordinator,
        reports,
        iterations,
        outcome,
        elapsed_ms(start),
    );
    let tree = CohortTree::from_coordinator(coordinator);
    artifacts::write_all(out, reports, &tree, &summary)?;
    Ok(())
}

fn cmd_serve(listen: &str, config_path: &Path, out: &Path) -> Result<ExitCode> {
    let text = fs::read_to_string(config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let config: ServeConfig =
        serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", config_path.display())))?;
    config.scheduler.validate().map_err(|e| config_error(e.to_string()))?;
    let listener = TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    println!("listening on {}", listener.local_addr()?);
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)).context("installing signal handler")?;

    let start = Instant::now();
    let mut all: Vec<RoundReport> = Vec::new();
    let mut iterations = 0;
    let mut flush_error = None;
    let outcome = serve(listener, config.clone(), stop, &mut |coordinator, batch| {
        all.extend_from_slice(batch);
        iterations += 1;
        if let Err(e) = write_serve_artifacts(out, &config, coordinator, &all, iterations, RunOutcome::Completed, start)
        {
            flush_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = flush_error {
        return Err(e);
    }
    let result = if outcome.interrupted { RunOutcome::Interrupted } else { RunOutcome::Completed };
    write_serve_artifacts(out, &config, &outcome.coordinator, &outcome.reports, outcome.iterations_run, result, start)?;
    println!(
        "{} iterations, {} reports; artifacts in {}",
        outcome.iterations_run,
        outcome.reports.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn cmd_client(connect: &str, data: &Path, metadata: &Path, reply_timeout: u64) -> Result<ExitCode> {
    let meta: ParticipantMetadata = read_json(metadata)?;
    let file: ClientDataFile = read_json(data)?;
    let mut node = ClientNode::from_files(meta, file).map_err(|e| config_error(e.to_string()))?;
    let opts = SocketClientOptions { reply_timeout: Duration::from_secs(reply_timeout), idle_timeout: None };
    let stats =
        run_socket_client(connect, &mut node, &opts).with_context(|| format!("client session with {connect}"))?;
    println!(
        "{}: {} tasks accepted, {} updates sent, {} acked, {} abandoned",
        node.client_id(),
        stats.tasks_accepted.len(),
        stats.updates_sent,
        stats.updates_acked,
        stats.updates_abandoned
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_inspect(out: &Path) -> Result<ExitCode> {
    let tree = artifacts::read_cohort_tree(out).map_err(|e| config_error(e.to_string()))?;
    let rows: Vec<RoundRow> =
        artifacts::read_rounds_csv(&out.join(artifacts::ROUNDS_CSV)).map_err(|e| config_error(e.to_string()))?;
    print!("{}", artifacts::render_tree(&tree, &rows));
    Ok(ExitCode::SUCCESS)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_export(scenario: &str, mode: Mode, seed: Option<u64>, out: &Path) -> Result<ExitCode> {
    let spec = load_scenario(scenario, seed)?;
    let bundle = socket_bundle(&spec, mode).map_err(|e| config_error(e.to_string()))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("server.json"), &bundle.server)?;
    for (meta, file) in &bundle.clients {
        write_json(&out.join(format!("{}.metadata.json", meta.participant_id)), meta)?;
        write_json(&out.join(format!("{}.data.json", meta.participant_id)), file)?;
    }
    println!("wrote server.json and {} client file pairs to {}", bundle.clients.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_scenarios(show: Option<&str>) -> Result<ExitCode> {
    match show {
        Some(name) => print!("{}", load_scenario(name, None)?.to_json()),
        None => {
            for name in builtin_names() {
                println!("{name}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_schema(out: Option<&Path>) -> Result<ExitCode> {
    let text = protocol_schema_text();
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate { scenario, mode, seed, out, no_compare } => {
            cmd_simulate(&scenario, mode, seed, &out, no_compare)
        }
        Command::Serve { listen, config, out } => cmd_serve(&listen, &config, &out),
        Command::Client { connect, data, metadata, reply_timeout } => {
            cmd_client(&connect, &data, &metadata, reply_timeout)
        }
        Command::Inspect { out } => cmd_inspect(&out),
        Command::Export { scenario, mode, seed, out } => cmd_export(&scenario, mode, seed, &out),
        Command::Scenarios { show } => cmd_scenarios(show.as_deref()),
        Command::Schema { out } => cmd_schema(out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COMMUNITYFL_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                info!("exiting with failure");
                ExitCode::FAILURE
            }
        }
    }
}
