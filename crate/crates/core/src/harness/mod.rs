//! Run orchestration: starts the pipeline and N agents, injects faults on a
//! schedule, then checks the resilience contracts over the artifacts.

mod checks;
mod deterministic;
pub mod frames;
pub mod oracle;
mod realtime;
mod switch;
pub mod traffic;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{ParamError, RunParameters, Stats, Timestamp};
use crate::transport::{TransportConfig, TransportMode};

pub use frames::{export_frames, FrameIndex};
pub use oracle::{replay_oracle, OracleState};
pub use switch::Switch;
pub use traffic::{measure_traffic, ReferenceRow, TrafficMetrics, HEADER_OVERHEAD_BYTES};

/// Simulated clock origin for deterministic runs.
pub const DETERMINISTIC_EPOCH: Timestamp = Timestamp::from_unix_micros(1_606_925_940_000_000);

pub const BROKER_DIR: &str = "broker";
pub const STORE_DIR: &str = "store";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Realtime,
    Deterministic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultTarget {
    Broker,
    Consumer,
    Store,
    Api,
    /// A node by spawn index.
    Node(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultAction {
    Kill,
    Restore,
    /// Node joins mid-run instead of at start.
    Add,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultEvent {
    /// Seconds after the run starts.
    pub at: u64,
    pub target: FaultTarget,
    pub action: FaultAction,
}

impl fmt::Display for FaultTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultTarget::Broker => f.write_str("broker"),
            FaultTarget::Consumer => f.write_str("consumer"),
            FaultTarget::Store => f.write_str("store"),
            FaultTarget::Api => f.write_str("api"),
            FaultTarget::Node(i) => write!(f, "node{i}"),
        }
    }
}

impl fmt::Display for FaultEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let action = match self.action {
            FaultAction::Kill => "kill",
            FaultAction::Restore => "restore",
            FaultAction::Add => "add",
        };
        write!(f, "{}:{}:{}", self.at, self.target, action)
    }
}

/// Parses `AT:TARGET:ACTION`, e.g. `10:broker:kill` or `5:node3:add`.
impl FromStr for FaultEvent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let [at, target, action] = parts[..] else {
            return Err(format!("expected AT:TARGET:ACTION, got {s:?}"));
        };
        let at = at.parse().map_err(|_| format!("bad fault time {at:?}"))?;
        let target = match target {
            "broker" => FaultTarget::Broker,
            "consumer" => FaultTarget::Consumer,
            "store" => FaultTarget::Store,
            "api" => FaultTarget::Api,
            other => match other.strip_prefix("node").map(str::parse) {
                Some(Ok(i)) => FaultTarget::Node(i),
                _ => return Err(format!("unknown fault target {other:?}")),
            },
        };
        let action = match action {
            "kill" => FaultAction::Kill,
            "restore" => FaultAction::Restore,
            "add" => FaultAction::Add,
            other => return Err(format!("unknown fault action {other:?}")),
        };
        Ok(FaultEvent { at, target, action })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub params: RunParameters,
    pub node_count: usize,
    pub infected_count: usize,
    /// Seconds. Deterministic runs tick at 0..=duration.
    pub duration: u64,
    pub seed: u64,
    pub transport: TransportConfig,
    pub faults: Vec<FaultEvent>,
    pub mode: RunMode,
    /// Serve the HTTP API during the run.
    pub api: bool,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            params: RunParameters::default(),
            node_count: 20,
            infected_count: 1,
            duration: 120,
            seed: 0,
            transport: TransportConfig::default(),
            faults: Vec::new(),
            mode: RunMode::Deterministic,
            api: false,
        }
    }
}

impl RunSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let invalid = |m: String| Err(HarnessError::InvalidSpec(m));
        self.params.validate()?;
        self.transport.validate().map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
        if self.infected_count > self.node_count {
            return invalid(format!("infected_count {} exceeds node_count {}", self.infected_count, self.node_count));
        }
        if self.mode == RunMode::Deterministic && self.transport.mode != TransportMode::InMemory {
            return invalid("deterministic runs need the in-memory transport".into());
        }
        let mut faults = self.faults.clone();
        faults.sort_by_key(|f| f.at);
        let mut down: std::collections::BTreeSet<FaultTarget> = Default::default();
        let mut seen_nodes: std::collections::BTreeSet<usize> = Default::default();
        for f in &faults {
            if f.at > self.duration {
                return invalid(format!("fault {f} is after the end of the run"));
            }
            match (f.target, f.action) {
                (FaultTarget::Node(i), _) if i >= self.node_count => {
                    return invalid(format!("fault {f}: node index beyond node_count"));
                }
                (FaultTarget::Node(_), FaultAction::Restore) => {
                    return invalid(format!("fault {f}: killed nodes are not restored"));
                }
                (FaultTarget::Node(i), FaultAction::Add) => {
                    if !seen_nodes.insert(i) {
                        return invalid(format!("fault {f}: a node can only join before other events"));
                    }
                }
                (FaultTarget::Node(i), FaultAction::Kill) => {
                    seen_nodes.insert(i);
                    if !down.insert(f.target) {
                        return invalid(format!("fault {f}: node already killed"));
                    }
                }
                (_, FaultAction::Add) => return invalid(format!("fault {f}: only nodes can be added")),
                (FaultTarget::Api, _) if !self.api => {
                    return invalid(format!("fault {f}: the run does not serve the API"));
                }
                (target, FaultAction::Kill) => {
                    if !down.insert(target) {
                        return invalid(format!("fault {f}: {target} is already down"));
                    }
                }
                (target, FaultAction::Restore) => {
                    if !down.remove(&target) {
                        return invalid(format!("fault {f}: restore without a preceding kill"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Spawn indices that join late, with their join time.
    pub(crate) fn late_joiners(&self) -> std::collections::BTreeMap<usize, u64> {
        self.faults
            .iter()
            .filter_map(|f| match (f.target, f.action) {
                (FaultTarget::Node(i), FaultAction::Add) => Some((i, f.at)),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid run spec: {0}")]
    InvalidSpec(String),
    #[error("startup failed: {0}")]
    Startup(String),
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error("api unreachable: {0}")]
    ApiUnreachable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<ParamError> for HarnessError {
    fn from(e: ParamError) -> Self {
        HarnessError::InvalidSpec(e.to_string())
    }
}

/// Outcome of one contract assertion.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }
}

/// Paths relative to the run's data directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifacts {
    pub broker_log: PathBuf,
    pub store_journal: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: RunMode,
    pub node_count: usize,
    pub infected_count: usize,
    pub duration: u64,
    pub seed: u64,
    pub stats: Stats,
    pub broker_records: u64,
    pub snapshots: u64,
    pub pending_reports: usize,
    pub traffic: TrafficMetrics,
    pub checks: Vec<Check>,
    pub artifacts: Artifacts,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn broker_log_path(&self, data_dir: &Path) -> PathBuf {
        data_dir.join(&self.artifacts.broker_log)
    }

    pub fn store_journal_path(&self, data_dir: &Path) -> PathBuf {
        data_dir.join(&self.artifacts.store_journal)
    }
}

/// Runs `spec` with all component state under `data_dir`, which should be
/// empty: a store holds one simulation.
pub fn run(spec: &RunSpec, data_dir: &Path) -> Result<RunReport, HarnessError> {
    spec.validate()?;
    std::fs::create_dir_all(data_dir.join(BROKER_DIR))?;
    std::fs::create_dir_all(data_dir.join(STORE_DIR))?;
    let outcome = match spec.mode {
        RunMode::Deterministic => deterministic::drive(spec, data_dir)?,
        RunMode::Realtime => realtime::drive(spec, data_dir)?,
    };
    checks::evaluate(spec, data_dir, outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(node_count: usize, duration: u64) -> RunSpec {
        RunSpec {
            params: RunParameters { field_width: 10, field_height: 10, zombie_lifetime: 20, ..RunParameters::default() },
            node_count,
            infected_count: 1,
            duration,
            seed: 11,
            ..RunSpec::default()
        }
    }

    #[test]
    fn fault_syntax_round_trips() {
        for text in ["10:broker:kill", "20:broker:restore", "5:node3:add", "7:api:kill"] {
            let fault: FaultEvent = text.parse().unwrap();
            assert_eq!(fault.to_string(), text);
        }
        assert!("10:disk:kill".parse::<FaultEvent>().is_err());
        assert!("x:broker:kill".parse::<FaultEvent>().is_err());
    }

    #[test]
    fn spec_validation() {
        let mut spec = small(2, 10);
        spec.infected_count = 3;
        assert!(spec.validate().is_err());
        let mut spec = small(2, 10);
        spec.faults = vec!["3:broker:restore".parse().unwrap()];
        assert!(spec.validate().is_err());
        spec.faults = vec!["3:broker:kill".parse().unwrap(), "4:broker:kill".parse().unwrap()];
        assert!(spec.validate().is_err());
        spec.faults = vec!["3:node0:restore".parse().unwrap()];
        assert!(spec.validate().is_err());
        spec.faults = vec!["3:api:kill".parse().unwrap()];
        assert!(spec.validate().is_err());
        spec.faults = vec!["3:broker:add".parse().unwrap()];
        assert!(spec.validate().is_err());
        spec.faults = vec!["30:broker:kill".parse().unwrap()];
        assert!(spec.validate().is_err());
        spec.faults = vec!["3:broker:kill".parse().unwrap(), "5:broker:restore".parse().unwrap()];
        spec.validate().unwrap();
        spec.transport.mode = TransportMode::Udp;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn single_node_lives_and_dies() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = small(1, 5);
        spec.infected_count = 0;
        spec.params.zombie_lifetime = 5;
        let report = run(&spec, dir.path()).unwrap();
        assert!(report.passed(), "{:#?}", report.checks);
        assert_eq!(report.stats.total_nodes, 1);
        assert_eq!(report.stats.deaths, 1);
        assert_eq!(report.broker_records, 6);
        let oracle = replay_oracle(&report.broker_log_path(dir.path())).unwrap();
        assert_eq!(oracle.records, 6);
    }

    #[test]
    fn clean_run_passes_every_check() {
        let dir = tempfile::tempdir().unwrap();
        let report = run(&small(6, 30), dir.path()).unwrap();
        assert!(report.passed(), "{:#?}", report.checks);
        assert_eq!(report.stats.total_nodes, 6);
        assert_eq!(report.stats.deaths, 6);
        assert!(report.stats.zombies >= 1);
    }
}
