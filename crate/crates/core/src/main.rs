use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ctsim::agent::{runner, AgentConfig, NodeAgent};
use ctsim::broker::{Broker, BrokerClient};
use ctsim::consumer::{Consumer, ConsumerConfig};
use ctsim::harness::{self, FaultEvent, RunMode, RunReport, RunSpec};
use ctsim::model::{compute_stats, Clock, NodeId, RunParameters, SystemClock};
use ctsim::store::{Store, StoreClient};
use ctsim::transport::{HearingRadius, Transport, TransportConfig, TransportMode, UdpTransport};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "ctsim", version, about = "Contact-tracing simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a whole simulation and print its report.
    Run(RunArgs),
    /// Replay a broker log through the consumer rules and print the result.
    ReplayOracle {
        #[arg(long)]
        log: PathBuf,
    },
    /// Write one frame per snapshot, plus an index, from a running API.
    ExportFrames {
        #[arg(long, default_value = "127.0.0.1:8080")]
        api: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        scale_factor: u32,
    },
    /// Print traffic figures against the reference numbers, either from a
    /// saved report or from a fresh deterministic run.
    Measure {
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        nodes: usize,
        #[arg(long, default_value_t = 120)]
        duration: u64,
    },
    /// Serve a broker.
    Broker {
        #[arg(long, default_value_t = ctsim::broker::DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        #[arg(long)]
        data_dir: PathBuf,
    },
    /// Serve a document store.
    Store {
        #[arg(long, default_value_t = ctsim::store::DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        #[arg(long)]
        data_dir: PathBuf,
    },
    /// Move reports from the broker into the store.
    Consumer {
        #[arg(long, default_value = "127.0.0.1:9092")]
        broker: SocketAddr,
        #[arg(long, default_value = "127.0.0.1:27018")]
        store: SocketAddr,
    },
    /// Serve the HTTP API over a store.
    Api {
        #[arg(long, default_value_t = ctsim::api::DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        #[arg(long, default_value = "127.0.0.1:27018")]
        store: SocketAddr,
    },
    /// Run one node agent until it dies.
    Node {
        #[arg(long, default_value = "127.0.0.1:9092")]
        broker: SocketAddr,
        #[arg(long)]
        infected: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        params: ParamArgs,
        #[command(flatten)]
        transport: TransportArgs,
    },
}

#[derive(Args, Clone)]
struct ParamArgs {
    /// Parameters file in the same JSON layout as the defaults.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    field_width: Option<u32>,
    #[arg(long)]
    field_height: Option<u32>,
    #[arg(long)]
    scale_factor: Option<u32>,
    #[arg(long)]
    zombie_lifetime: Option<u64>,
    #[arg(long)]
    infection_radius: Option<f64>,
    #[arg(long)]
    infection_cooldown: Option<u64>,
}

impl ParamArgs {
    fn resolve(&self) -> Result<RunParameters> {
        self.resolve_onto(RunParameters::default())
    }

    /// The parameters file replaces `base`; individual flags then override.
    fn resolve_onto(&self, base: RunParameters) -> Result<RunParameters> {
        let mut p = match &self.params {
            Some(path) => RunParameters::load(path)?,
            None => base,
        };
        if let Some(v) = self.field_width {
            p.field_width = v;
        }
        if let Some(v) = self.field_height {
            p.field_height = v;
        }
        if let Some(v) = self.scale_factor {
            p.scale_factor = v;
        }
        if let Some(v) = self.zombie_lifetime {
            p.zombie_lifetime = v;
        }
        if let Some(v) = self.infection_radius {
            p.infection_radius = v;
        }
        if let Some(v) = self.infection_cooldown {
            p.infection_cooldown = v;
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportKind {
    Udp,
    InMemory,
}

#[derive(Args, Clone)]
struct TransportArgs {
    #[arg(long, value_enum)]
    transport: Option<TransportKind>,
    #[arg(long)]
    broadcast_port: Option<u16>,
    #[arg(long)]
    broadcast_address: Option<IpAddr>,
    /// Cells, or "unlimited".
    #[arg(long)]
    hearing_radius: Option<String>,
    #[arg(long)]
    loss_probability: Option<f64>,
}

impl TransportArgs {
    fn apply(&self, mut config: TransportConfig) -> Result<TransportConfig> {
        if let Some(kind) = self.transport {
            config.mode = match kind {
                TransportKind::Udp => TransportMode::Udp,
                TransportKind::InMemory => TransportMode::InMemory,
            };
        }
        if let Some(port) = self.broadcast_port {
            config.broadcast_port = port;
        }
        if let Some(address) = self.broadcast_address {
            config.broadcast_address = address;
        }
        if let Some(radius) = &self.hearing_radius {
            config.hearing_radius = match radius.as_str() {
                "unlimited" => HearingRadius::Unlimited,
                cells => HearingRadius::Cells(cells.parse().context("hearing radius")?),
            };
        }
        if let Some(loss) = self.loss_probability {
            config.loss_probability = loss;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Realtime,
    Deterministic,
}

#[derive(Args)]
struct RunArgs {
    /// Full run spec as JSON; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[command(flatten)]
    params: ParamArgs,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    infected: Option<usize>,
    #[arg(long)]
    duration: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[command(flatten)]
    transport: TransportArgs,
    /// AT:TARGET:ACTION, e.g. 10:broker:kill, 5:node3:add. Repeatable.
    #[arg(long = "fault")]
    faults: Vec<FaultEvent>,
    /// Serve the HTTP API during the run.
    #[arg(long)]
    api: bool,
    /// Component state directory; must be fresh for each run.
    #[arg(long)]
    data_dir: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

impl RunArgs {
    fn spec(&self) -> Result<RunSpec> {
        let mut spec = match &self.spec {
            Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?).context("run spec")?,
            None => RunSpec::default(),
        };
        spec.params = self.params.resolve_onto(spec.params)?;
        if let Some(v) = self.nodes {
            spec.node_count = v;
        }
        if let Some(v) = self.infected {
            spec.infected_count = v;
        }
        if let Some(v) = self.duration {
            spec.duration = v;
        }
        if let Some(v) = self.seed {
            spec.seed = v;
        }
        if let Some(mode) = self.mode {
            spec.mode = match mode {
                ModeArg::Realtime => RunMode::Realtime,
                ModeArg::Deterministic => RunMode::Deterministic,
            };
        }
        spec.transport = self.transport.apply(spec.transport)?;
        spec.faults.extend(self.faults.iter().copied());
        spec.api |= self.api;
        Ok(spec)
    }
}

fn announce(addr: SocketAddr) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "listening on {addr}")?;
    out.flush()?;
    Ok(())
}

/// Prints a result; a reader that went away early (`| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn park_forever() -> ! {
    loop {
        std::thread::park();
    }
}

fn print_traffic(report: &RunReport) {
    println!("{:<22} {:>14} {:>12} {:>24}  result", "quantity", "measured", "reference", "accepted range");
    for row in &report.traffic.comparison {
        println!(
            "{:<22} {:>14.1} {:>12.1} {:>24}  {}",
            row.quantity,
            row.measured,
            row.reference,
            format!("[{:.0}, {:.0}]", row.low, row.high),
            if row.within { "within" } else { "outside" }
        );
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run(args) => {
            let spec = args.spec()?;
            let report = harness::run(&spec, &args.data_dir)?;
            let json = serde_json::to_string_pretty(&report)?;
            emit(&json)?;
            if let Some(path) = &args.report {
                std::fs::write(path, &json)?;
            }
            for check in report.checks.iter().filter(|c| !c.passed) {
                eprintln!("check failed: {} ({})", check.name, check.detail);
            }
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::ReplayOracle { log } => {
            let oracle = harness::replay_oracle(&log)?;
            let documents: Vec<_> = oracle.state.documents.values().collect();
            let snapshot_stats: Vec<_> = oracle
                .state
                .snapshots
                .iter()
                .map(|s| serde_json::json!({"sequence": s.sequence, "stats": compute_stats(&s.documents)}))
                .collect();
            let out = serde_json::json!({
                "records": oracle.records,
                "sealed_through": oracle.sealed_through,
                "pending_reports": oracle.pending_reports,
                "malformed": oracle.malformed,
                "stats": compute_stats(documents.iter().copied()),
                "documents": documents,
                "snapshots": snapshot_stats,
            });
            emit(&serde_json::to_string_pretty(&out)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportFrames { api, out, scale_factor } => {
            let index = harness::export_frames(&api, &out, scale_factor)?;
            println!("wrote {} frames to {}", index.frames.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Measure { report, nodes, duration } => {
            let report: RunReport = match report {
                Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
                None => {
                    let dir = std::env::temp_dir().join(format!("ctsim-measure-{}", std::process::id()));
                    let spec = RunSpec { node_count: nodes, duration, ..RunSpec::default() };
                    let report = harness::run(&spec, &dir);
                    let _ = std::fs::remove_dir_all(&dir);
                    report?
                }
            };
            print_traffic(&report);
            Ok(ExitCode::SUCCESS)
        }
        Command::Broker { port, bind, data_dir } => {
            let broker = Broker::open(&data_dir)?;
            let server = ctsim::broker::serve(Arc::new(broker), (bind, port))?;
            announce(server.local_addr())?;
            park_forever()
        }
        Command::Store { port, bind, data_dir } => {
            let store = Store::open(&data_dir)?;
            let server = ctsim::store::serve(Arc::new(store), (bind, port))?;
            announce(server.local_addr())?;
            park_forever()
        }
        Command::Consumer { broker, store } => {
            let mut consumer = Consumer::new(
                Arc::new(BrokerClient::new(broker)?),
                Arc::new(StoreClient::new(store)?),
                ConsumerConfig::default(),
            );
            consumer.run(&std::sync::atomic::AtomicBool::new(false));
            Ok(ExitCode::SUCCESS)
        }
        Command::Api { port, bind, store } => {
            let server = ctsim::api::serve(Arc::new(StoreClient::new(store)?), (bind, port))?;
            announce(server.local_addr())?;
            park_forever()
        }
        Command::Node { broker, infected, seed, params, transport } => {
            let params = params.resolve()?;
            let transport_config = transport.apply(TransportConfig { mode: TransportMode::Udp, ..Default::default() })?;
            let id = NodeId::random();
            let seed = seed.unwrap_or_else(rand::random);
            let clock = Arc::new(SystemClock);
            let agent = NodeAgent::spawn(AgentConfig::new(id, infected, params, seed), clock.now());
            let link: Arc<dyn Transport> = match transport_config.mode {
                TransportMode::Udp => Arc::new(UdpTransport::bind(&transport_config, id)?),
                TransportMode::InMemory => {
                    bail!("a standalone node has no in-memory peers; use --transport udp")
                }
            };
            println!("node {id} at {}", agent.state().position);
            let handle = runner::spawn(agent, link, Arc::new(BrokerClient::new(broker)?), clock)?;
            let agent = handle.wait();
            println!("node {id} finished: {:?}", agent.lifecycle());
            Ok(ExitCode::SUCCESS)
        }
    }
}
