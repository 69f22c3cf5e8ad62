//! Post-run assertions over the broker log, the store journal and the agents'
//! own records. Nothing here runs while faults are being injected.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use super::oracle::{replay_payloads, OracleState};
use super::traffic::measure_traffic;
use super::{Artifacts, Check, HarnessError, RunReport, RunSpec, BROKER_DIR, STORE_DIR};
use crate::agent::{Lifecycle, NodeAgent};
use crate::broker::log::read_log_file;
use crate::broker::{Broker, DEFAULT_TOPIC, STORE_CONSUMER_GROUP};
use crate::model::{compute_stats, ContactRecord, NodeId, ReportMessage, Timestamp};
use crate::store::{Store, StoreState, JOURNAL_FILE};

pub(super) struct NodeOutcome {
    pub index: usize,
    pub agent: NodeAgent,
    /// Set when a fault killed the node, as opposed to a natural death or
    /// the end of the run.
    pub killed_at: Option<Timestamp>,
    /// Set for nodes that joined mid-run.
    pub joined_at: Option<Timestamp>,
}

impl NodeOutcome {
    pub fn killed(&self) -> bool {
        self.killed_at.is_some()
    }
}

pub(super) struct ConsumerWindow {
    pub label: String,
    pub retained_at_kill: u64,
    pub retained_at_restore: u64,
    pub published_during: u64,
}

pub(super) struct RunOutcome {
    pub nodes: Vec<NodeOutcome>,
    /// Broker down from the first to the second timestamp.
    pub broker_outages: Vec<(Timestamp, Timestamp)>,
    pub consumer_windows: Vec<ConsumerWindow>,
    pub store_outages: usize,
    /// Checks made while the run was live, such as HTTP probes.
    pub live_checks: Vec<Check>,
    /// Broker, store and consumer all running when the run ended.
    pub pipeline_up_at_end: bool,
}

pub(super) fn broker_log_relative() -> PathBuf {
    Path::new(BROKER_DIR).join(format!("{DEFAULT_TOPIC}.log"))
}

pub(super) fn evaluate(spec: &RunSpec, data_dir: &Path, outcome: RunOutcome) -> Result<RunReport, HarnessError> {
    let artifacts = Artifacts {
        broker_log: broker_log_relative(),
        store_journal: Path::new(STORE_DIR).join(JOURNAL_FILE),
    };
    let log_path = data_dir.join(&artifacts.broker_log);
    let payloads = if log_path.exists() {
        read_log_file(&log_path).map_err(|e| HarnessError::Artifact(e.to_string()))?
    } else {
        Vec::new()
    };
    let reports: Vec<ReportMessage> = payloads.iter().filter_map(|p| ReportMessage::decode(p).ok()).collect();
    let oracle = replay_payloads(payloads);
    let live = Store::open(&data_dir.join(STORE_DIR))
        .map_err(|e| HarnessError::Artifact(format!("reopening store: {e}")))?
        .state();
    let committed = Broker::open(&data_dir.join(BROKER_DIR))
        .map_err(|e| HarnessError::Artifact(format!("reopening broker: {e}")))?
        .committed(DEFAULT_TOPIC, STORE_CONSUMER_GROUP);

    let mut checks = vec![
        oracle_equivalence(&oracle, &live, outcome.pipeline_up_at_end),
        contact_conservation(&outcome.nodes, &reports),
        final_messages(&outcome.nodes, &reports, &live),
    ];
    for (i, (down, up)) in outcome.broker_outages.iter().enumerate() {
        checks.push(movement_loss(i, *down, *up, &reports));
    }
    for w in &outcome.consumer_windows {
        let grew = w.retained_at_restore.saturating_sub(w.retained_at_kill);
        checks.push(Check::new(
            format!("consumer_retention[{}]", w.label),
            w.retained_at_restore == w.retained_at_kill + w.published_during,
            format!(
                "retained {} -> {} (+{grew}), {} published during downtime",
                w.retained_at_kill, w.retained_at_restore, w.published_during
            ),
        ));
    }
    if outcome.store_outages > 0 {
        let complete = live.snapshots.len() == oracle.state.snapshots.len() && committed == oracle.sealed_through;
        checks.push(Check::new(
            "store_outage_no_loss",
            complete,
            format!(
                "{} of {} batches stored, committed offset {committed} of {}",
                live.snapshots.len(),
                oracle.state.snapshots.len(),
                oracle.sealed_through
            ),
        ));
    }
    for node in outcome.nodes.iter().filter(|n| n.joined_at.is_some()) {
        checks.push(node_join(node, &outcome.nodes, &reports));
    }
    checks.extend(outcome.live_checks);

    let traffic = measure_traffic(outcome.nodes.iter().map(|n| n.agent.metrics()));
    Ok(RunReport {
        mode: spec.mode,
        node_count: spec.node_count,
        infected_count: spec.infected_count,
        duration: spec.duration,
        seed: spec.seed,
        stats: compute_stats(live.documents.values()),
        broker_records: oracle.records,
        snapshots: live.snapshots.len() as u64,
        pending_reports: oracle.pending_reports,
        traffic,
        checks,
        artifacts,
    })
}

/// The live store must hold exactly what a single-pass replay of the broker
/// log produces. When part of the pipeline is still down at the end, the
/// store may lag, but only by whole batches.
fn oracle_equivalence(oracle: &OracleState, live: &StoreState, complete: bool) -> Check {
    let expected = &oracle.state.snapshots;
    let got = &live.snapshots;
    let prefix = got.len() <= expected.len() && got[..] == expected[..got.len()];
    let documents_match = if got.len() == expected.len() {
        live.documents == oracle.state.documents
    } else {
        let at_last: BTreeMap<NodeId, _> =
            got.last().map(|s| s.documents.iter().map(|d| (d.uuid, d.clone())).collect()).unwrap_or_default();
        live.documents == at_last
    };
    let lengths_ok = !complete || got.len() == expected.len();
    let stats_seq = |s: &[crate::store::Snapshot]| -> Vec<_> { s.iter().map(|x| compute_stats(&x.documents)).collect() };
    let stats_match = stats_seq(got)[..] == stats_seq(expected)[..got.len().min(expected.len())];
    Check::new(
        "oracle_equivalence",
        prefix && documents_match && lengths_ok && stats_match,
        format!(
            "live {} documents / {} snapshots, oracle {} documents / {} snapshots",
            live.documents.len(),
            got.len(),
            oracle.state.documents.len(),
            expected.len()
        ),
    )
}

/// Every contact a surviving node recorded is either on the broker or still
/// held by the node, and nothing on the broker was made up.
fn contact_conservation(nodes: &[NodeOutcome], reports: &[ReportMessage]) -> Check {
    let mut published: BTreeMap<NodeId, BTreeSet<ContactRecord>> = BTreeMap::new();
    for r in reports {
        published.entry(r.uuid).or_default().extend(r.contacts.iter().cloned());
    }
    let mut total = 0usize;
    let mut failures = Vec::new();
    for node in nodes.iter().filter(|n| !n.killed()) {
        let recorded: BTreeSet<ContactRecord> = node.agent.recorded_contacts().iter().cloned().collect();
        let on_broker = published.remove(&node.agent.id()).unwrap_or_default();
        let held: BTreeSet<ContactRecord> = node.agent.unpublished_contacts().into_iter().collect();
        let accounted: BTreeSet<ContactRecord> = on_broker.union(&held).cloned().collect();
        total += recorded.len();
        if accounted != recorded {
            failures.push(format!(
                "node{}: {} recorded, {} accounted for",
                node.index,
                recorded.len(),
                accounted.len()
            ));
        }
    }
    let detail = if failures.is_empty() {
        format!("{total} contacts accounted for")
    } else {
        failures.join("; ")
    };
    Check::new("contact_conservation", failures.is_empty(), detail)
}

/// Nodes that died naturally published exactly one alive=false report; every
/// other node published none, and killed nodes stay alive in the store.
fn final_messages(nodes: &[NodeOutcome], reports: &[ReportMessage], live: &StoreState) -> Check {
    let mut finals: BTreeMap<NodeId, usize> = BTreeMap::new();
    for r in reports.iter().filter(|r| !r.alive) {
        *finals.entry(r.uuid).or_default() += 1;
    }
    let mut failures = Vec::new();
    let mut deaths = 0;
    for node in nodes {
        let id = node.agent.id();
        let count = finals.get(&id).copied().unwrap_or(0);
        let dead = node.agent.lifecycle() == Lifecycle::Dead;
        deaths += usize::from(dead);
        let expected = usize::from(dead);
        if count != expected {
            failures.push(format!("node{}: {count} final reports, expected {expected}", node.index));
        }
        if node.killed() && live.documents.get(&id).is_some_and(|d| !d.alive) {
            failures.push(format!("node{}: killed but stored as dead", node.index));
        }
    }
    let detail = if failures.is_empty() {
        format!("{deaths} natural deaths, {} killed", nodes.iter().filter(|n| n.killed()).count())
    } else {
        failures.join("; ")
    };
    Check::new("final_messages", failures.is_empty(), detail)
}

/// No report timestamped strictly inside a broker outage reached the broker.
fn movement_loss(i: usize, down: Timestamp, up: Timestamp, reports: &[ReportMessage]) -> Check {
    let leaked = reports.iter().filter(|r| r.timestamp > down && r.timestamp < up).count();
    Check::new(
        format!("movement_loss[{i}]"),
        leaked == 0,
        format!("{leaked} reports timestamped inside the outage {down} .. {up}"),
    )
}

/// A node that joined mid-run shows up in contacts within two ticks. The
/// agents' own records count as evidence, so a broker outage at join time
/// does not hide the meeting; peers that were dead or killed cannot meet it.
fn node_join(node: &NodeOutcome, nodes: &[NodeOutcome], reports: &[ReportMessage]) -> Check {
    let joined = node.joined_at.expect("only called for late joiners");
    let id = node.agent.id();
    let deadline = joined.plus_secs(2);
    let first_tick = joined.plus_secs(1);
    let others = || nodes.iter().filter(|n| n.agent.id() != id);
    let peers = others().any(|n| {
        n.agent.state().born_at <= joined
            && !n.agent.lifetime_over(first_tick)
            && n.killed_at.is_none_or(|k| k > first_tick)
    });
    let published = reports.iter().find(|r| {
        r.timestamp <= deadline
            && ((r.uuid == id && !r.contacts.is_empty()) || r.contacts.iter().any(|c| c.uuid == id))
    });
    let recorded = node
        .agent
        .recorded_contacts()
        .iter()
        .chain(others().flat_map(|n| n.agent.recorded_contacts().iter().filter(|c| c.uuid == id)))
        .filter(|c| c.timestamp <= deadline)
        .map(|c| c.timestamp)
        .min();
    let name = format!("node_join[node{}]", node.index);
    match (published, recorded, peers) {
        (Some(r), _, _) => Check::new(name, true, format!("contact published at {}", r.timestamp)),
        (None, Some(at), _) => Check::new(name, true, format!("contact recorded at {at}, not yet published")),
        (None, None, false) => Check::new(name, true, "no live peers to meet"),
        (None, None, true) => Check::new(name, false, format!("no contact recorded by {deadline}")),
    }
}
