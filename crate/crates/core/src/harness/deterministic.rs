//! Single-threaded driver on a simulated clock. Each tick runs every phase
//! for all nodes (in ascending id order) before moving to the next phase:
//! listen-drain, health, move, broadcast, publish. The consumer then drains.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checks::{ConsumerWindow, NodeOutcome, RunOutcome};
use super::{Check, FaultAction, FaultEvent, FaultTarget, HarnessError, RunSpec, Switch, BROKER_DIR, DETERMINISTIC_EPOCH, STORE_DIR};
use crate::agent::{AgentConfig, Lifecycle, NodeAgent};
use crate::api::{self, http_get, ApiServer};
use crate::broker::{Broker, BrokerLink, DEFAULT_TOPIC};
use crate::consumer::{Consumer, ConsumerConfig};
use crate::model::{NodeId, Timestamp};
use crate::store::Store;
use crate::transport::{MemoryNetwork, MemoryTransport, Transport};

struct Scheduled {
    index: usize,
    agent: NodeAgent,
    transport: Option<MemoryTransport>,
    final_broadcast_sent: bool,
    joined_at: Option<Timestamp>,
}

struct OpenConsumerWindow {
    label: String,
    retained_at_kill: u64,
    published: u64,
}

struct Driver<'a> {
    spec: &'a RunSpec,
    data_dir: &'a Path,
    plans: Vec<(NodeId, u64)>,
    network: MemoryNetwork,
    broker: Arc<Switch<Broker>>,
    store: Arc<Switch<Store>>,
    consumer: Option<Consumer>,
    api: Option<ApiServer>,
    api_addr: Option<std::net::SocketAddr>,
    /// Ascending by node id.
    running: Vec<Scheduled>,
    finished: Vec<NodeOutcome>,
    broker_down_since: Option<Timestamp>,
    consumer_window: Option<OpenConsumerWindow>,
    outcome: RunOutcome,
}

pub(super) fn drive(spec: &RunSpec, data_dir: &Path) -> Result<RunOutcome, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let plans: Vec<(NodeId, u64)> =
        (0..spec.node_count).map(|_| (NodeId::from_random_bytes(rng.random()), rng.random())).collect();
    let network = MemoryNetwork::new(spec.transport.hearing_radius, spec.transport.loss_probability, rng.random());
    let broker = Arc::new(Switch::new(open_broker(data_dir)?));
    let store = Arc::new(Switch::new(open_store(data_dir)?));
    let consumer = Some(Consumer::new(broker.clone(), store.clone(), ConsumerConfig::default()));
    let api = if spec.api { Some(api::serve(store.clone(), "127.0.0.1:0")?) } else { None };
    let mut driver = Driver {
        spec,
        data_dir,
        plans,
        network,
        api_addr: api.as_ref().map(ApiServer::local_addr),
        broker,
        store,
        consumer,
        api,
        running: Vec::new(),
        finished: Vec::new(),
        broker_down_since: None,
        consumer_window: None,
        outcome: RunOutcome {
            nodes: Vec::new(),
            broker_outages: Vec::new(),
            consumer_windows: Vec::new(),
            store_outages: 0,
            live_checks: Vec::new(),
            pipeline_up_at_end: false,
        },
    };
    driver.run()?;
    Ok(driver.finish())
}

fn open_broker(data_dir: &Path) -> Result<Broker, HarnessError> {
    Broker::open(&data_dir.join(BROKER_DIR)).map_err(|e| HarnessError::Startup(format!("broker: {e}")))
}

fn open_store(data_dir: &Path) -> Result<Store, HarnessError> {
    Store::open(&data_dir.join(STORE_DIR)).map_err(|e| HarnessError::Startup(format!("store: {e}")))
}

impl Driver<'_> {
    fn run(&mut self) -> Result<(), HarnessError> {
        let late = self.spec.late_joiners();
        let mut faults = self.spec.faults.clone();
        faults.sort_by_key(|f| f.at);
        let start = DETERMINISTIC_EPOCH;
        for index in (0..self.spec.node_count).filter(|i| !late.contains_key(i)) {
            self.spawn(index, start, None)?;
        }
        for t in 0..=self.spec.duration {
            let now = start.plus_secs(t);
            for fault in faults.iter().filter(|f| f.at == t) {
                self.apply(fault, now)?;
            }
            self.tick(now);
            if let Some(consumer) = self.consumer.as_mut() {
                consumer.drain();
            }
        }
        Ok(())
    }

    fn spawn(&mut self, index: usize, now: Timestamp, joined_at: Option<Timestamp>) -> Result<(), HarnessError> {
        let (id, seed) = self.plans[index];
        let config = AgentConfig::new(id, index < self.spec.infected_count, self.spec.params.clone(), seed);
        let agent = NodeAgent::spawn(config, now);
        let transport = self
            .network
            .register_peer(id, agent.position_source())
            .map_err(|e| HarnessError::Startup(e.to_string()))?;
        let at = self.running.partition_point(|s| s.agent.id() < id);
        self.running.insert(
            at,
            Scheduled { index, agent, transport: Some(transport), final_broadcast_sent: false, joined_at },
        );
        Ok(())
    }

    fn tick(&mut self, now: Timestamp) {
        for node in &mut self.running {
            if let Some(transport) = &node.transport {
                for datagram in transport.drain() {
                    if let Err(e) = node.agent.on_datagram(&datagram.payload, now) {
                        tracing::debug!(node = node.index, "dropped datagram: {e}");
                    }
                }
            }
        }
        for node in &mut self.running {
            node.agent.close_tick();
            node.agent.tick_health(now);
            if node.agent.lifetime_over(now) {
                node.agent.begin_dying();
            }
        }
        for node in &mut self.running {
            if node.agent.lifecycle() == Lifecycle::Alive {
                node.agent.step();
            }
        }
        for node in &mut self.running {
            let send = match node.agent.lifecycle() {
                Lifecycle::Alive => true,
                Lifecycle::Dying if !node.final_broadcast_sent => {
                    node.final_broadcast_sent = true;
                    true
                }
                _ => false,
            };
            if send {
                let payload = node.agent.encoded_broadcast(now);
                if let Some(transport) = &node.transport {
                    if let Err(e) = transport.broadcast(&payload) {
                        tracing::warn!(node = node.index, "broadcast failed: {e}");
                    }
                }
            }
        }
        for node in &mut self.running {
            let report = node.agent.next_report(now).encode();
            match self.broker.publish(DEFAULT_TOPIC, &report) {
                Ok(_) => {
                    node.agent.publish_succeeded(report.len());
                    if let Some(w) = self.consumer_window.as_mut() {
                        w.published += 1;
                    }
                }
                Err(_) => node.agent.publish_failed(),
            }
        }
        let (dead, running): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.running).into_iter().partition(|n| n.agent.lifecycle() == Lifecycle::Dead);
        self.running = running;
        self.finished.extend(dead.into_iter().map(|n| retire(n, None)));
    }

    fn retained(&self) -> Option<u64> {
        self.broker.current().map(|b| b.retained_count_for(DEFAULT_TOPIC, crate::broker::STORE_CONSUMER_GROUP))
    }

    fn apply(&mut self, fault: &FaultEvent, now: Timestamp) -> Result<(), HarnessError> {
        tracing::info!(%fault, "injecting fault");
        match (fault.target, fault.action) {
            (FaultTarget::Broker, FaultAction::Kill) => {
                self.broker.take();
                self.broker_down_since = Some(now);
            }
            (FaultTarget::Broker, FaultAction::Restore) => {
                self.broker.set(open_broker(self.data_dir)?);
                if let Some(down) = self.broker_down_since.take() {
                    self.outcome.broker_outages.push((down, now));
                }
            }
            (FaultTarget::Store, FaultAction::Kill) => {
                self.store.take();
                self.outcome.store_outages += 1;
                if let Some(addr) = self.api_addr.filter(|_| self.api.is_some()) {
                    self.outcome.live_checks.push(probe_data_unavailable(addr, fault));
                }
            }
            (FaultTarget::Store, FaultAction::Restore) => {
                self.store.set(open_store(self.data_dir)?);
                if let Some(addr) = self.api_addr.filter(|_| self.api.is_some()) {
                    self.outcome.live_checks.push(probe_status(addr, "/data", 200, fault));
                }
            }
            (FaultTarget::Consumer, FaultAction::Kill) => {
                self.consumer = None;
                if let Some(retained) = self.retained() {
                    self.consumer_window =
                        Some(OpenConsumerWindow { label: fault.to_string(), retained_at_kill: retained, published: 0 });
                }
            }
            (FaultTarget::Consumer, FaultAction::Restore) => {
                self.close_consumer_window();
                self.consumer =
                    Some(Consumer::new(self.broker.clone(), self.store.clone(), ConsumerConfig::default()));
            }
            (FaultTarget::Api, FaultAction::Kill) => {
                if let Some(server) = self.api.take() {
                    server.kill();
                }
                if let Some(addr) = self.api_addr {
                    self.outcome.live_checks.push(probe_refused(addr, fault));
                }
            }
            (FaultTarget::Api, FaultAction::Restore) => {
                if let Some(addr) = self.api_addr {
                    self.api = Some(api::serve(self.store.clone(), addr)?);
                    self.outcome.live_checks.push(probe_status(addr, "/health", 200, fault));
                }
            }
            (FaultTarget::Node(index), FaultAction::Kill) => {
                if let Some(pos) = self.running.iter().position(|n| n.index == index) {
                    let node = self.running.remove(pos);
                    self.finished.push(retire(node, Some(now)));
                }
            }
            (FaultTarget::Node(index), FaultAction::Add) => self.spawn(index, now, Some(now))?,
            (target, action) => {
                return Err(HarnessError::InvalidSpec(format!("unsupported fault {action:?} for {target}")))
            }
        }
        Ok(())
    }

    fn close_consumer_window(&mut self) {
        if let Some(w) = self.consumer_window.take() {
            if let Some(retained) = self.retained() {
                self.outcome.consumer_windows.push(ConsumerWindow {
                    label: w.label,
                    retained_at_kill: w.retained_at_kill,
                    retained_at_restore: retained,
                    published_during: w.published,
                });
            }
        }
    }

    fn finish(mut self) -> RunOutcome {
        let end = DETERMINISTIC_EPOCH.plus_secs(self.spec.duration + 1);
        if let Some(down) = self.broker_down_since.take() {
            self.outcome.broker_outages.push((down, end));
        }
        self.close_consumer_window();
        self.outcome.pipeline_up_at_end = self.broker.is_up() && self.store.is_up() && self.consumer.is_some();
        if let Some(server) = self.api.take() {
            server.kill();
        }
        self.consumer = None;
        self.broker.take();
        self.store.take();
        let mut nodes = std::mem::take(&mut self.finished);
        nodes.extend(std::mem::take(&mut self.running).into_iter().map(|n| retire(n, None)));
        nodes.sort_by_key(|n| n.index);
        self.outcome.nodes = nodes;
        self.outcome
    }
}

fn retire(mut node: Scheduled, killed_at: Option<Timestamp>) -> NodeOutcome {
    node.transport.take();
    NodeOutcome { index: node.index, agent: node.agent, killed_at, joined_at: node.joined_at }
}

pub(super) fn probe_data_unavailable(addr: std::net::SocketAddr, fault: &FaultEvent) -> Check {
    let name = format!("api_opaque_failure[{fault}]");
    match http_get(&format!("http://{addr}/data")) {
        Ok((status, body)) => Check::new(
            name,
            status == 503 && body == r#"{"error":"unavailable"}"#,
            format!("GET /data -> {status} {body}"),
        ),
        Err(e) => Check::new(name, false, format!("GET /data failed: {e}")),
    }
}

pub(super) fn probe_status(addr: std::net::SocketAddr, path: &str, expected: u16, fault: &FaultEvent) -> Check {
    let name = format!("api_after[{fault}]");
    match http_get(&format!("http://{addr}{path}")) {
        Ok((status, _)) => Check::new(name, status == expected, format!("GET {path} -> {status}")),
        Err(e) => Check::new(name, false, format!("GET {path} failed: {e}")),
    }
}

pub(super) fn probe_refused(addr: std::net::SocketAddr, fault: &FaultEvent) -> Check {
    let name = format!("api_down[{fault}]");
    match http_get(&format!("http://{addr}/health")) {
        Ok((status, _)) => Check::new(name, false, format!("GET /health still answered {status}")),
        Err(_) => Check::new(name, true, "connection refused"),
    }
}
