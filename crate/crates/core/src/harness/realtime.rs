//! Wall-clock driver: broker and store behind their TCP protocols, the
//! consumer and API on their own threads, and one set of threads per node.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checks::{ConsumerWindow, NodeOutcome, RunOutcome};
use super::deterministic::{probe_data_unavailable, probe_refused, probe_status};
use super::{FaultAction, FaultEvent, FaultTarget, HarnessError, RunSpec, BROKER_DIR, STORE_DIR};
use crate::agent::runner::{self, AgentHandle};
use crate::agent::{AgentConfig, NodeAgent};
use crate::api::{self, ApiServer};
use crate::broker::{self, Broker, BrokerClient, BrokerServer, DEFAULT_TOPIC, STORE_CONSUMER_GROUP};
use crate::consumer::{Batcher, Consumer, ConsumerConfig, ConsumerHandle};
use crate::model::{Clock, NodeId, SystemClock, Timestamp};
use crate::store::{self, Store, StoreClient, StoreServer};
use crate::transport::{MemoryNetwork, Transport, TransportMode, UdpTransport};

const CATCH_UP_LIMIT: Duration = Duration::from_secs(10);

struct RunningNode {
    index: usize,
    handle: AgentHandle,
    joined_at: Option<Timestamp>,
}

struct Driver<'a> {
    spec: &'a RunSpec,
    data_dir: &'a Path,
    plans: Vec<(NodeId, u64)>,
    network: MemoryNetwork,
    clock: Arc<SystemClock>,
    broker_addr: SocketAddr,
    store_addr: SocketAddr,
    api_addr: Option<SocketAddr>,
    broker: Option<BrokerServer>,
    store: Option<StoreServer>,
    consumer: Option<ConsumerHandle>,
    api: Option<ApiServer>,
    running: Vec<RunningNode>,
    finished: Vec<NodeOutcome>,
    broker_down_since: Option<Timestamp>,
    /// Label, retained count and log length when the consumer went down.
    consumer_down: Option<(String, u64, u64)>,
    outcome: RunOutcome,
}

pub(super) fn drive(spec: &RunSpec, data_dir: &Path) -> Result<RunOutcome, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let plans: Vec<(NodeId, u64)> =
        (0..spec.node_count).map(|_| (NodeId::from_random_bytes(rng.random()), rng.random())).collect();
    let network = MemoryNetwork::new(spec.transport.hearing_radius, spec.transport.loss_probability, rng.random());

    let broker = serve_broker(data_dir, "127.0.0.1:0".parse().expect("literal address"))?;
    let store = serve_store(data_dir, "127.0.0.1:0".parse().expect("literal address"))?;
    let (broker_addr, store_addr) = (broker.local_addr(), store.local_addr());
    let consumer = Some(start_consumer(broker_addr, store_addr)?);
    let api = if spec.api { Some(api::serve(Arc::new(StoreClient::new(store_addr)?), "127.0.0.1:0")?) } else { None };

    let mut driver = Driver {
        spec,
        data_dir,
        plans,
        network,
        clock: Arc::new(SystemClock),
        broker_addr,
        store_addr,
        api_addr: api.as_ref().map(ApiServer::local_addr),
        broker: Some(broker),
        store: Some(store),
        consumer,
        api,
        running: Vec::new(),
        finished: Vec::new(),
        broker_down_since: None,
        consumer_down: None,
        outcome: RunOutcome {
            nodes: Vec::new(),
            broker_outages: Vec::new(),
            consumer_windows: Vec::new(),
            store_outages: 0,
            live_checks: Vec::new(),
            pipeline_up_at_end: false,
        },
    };
    let result = driver.run();
    let outcome = driver.finish();
    result.map(|()| outcome)
}

fn serve_broker(data_dir: &Path, addr: SocketAddr) -> Result<BrokerServer, HarnessError> {
    let broker = Broker::open(&data_dir.join(BROKER_DIR)).map_err(|e| HarnessError::Startup(format!("broker: {e}")))?;
    Ok(broker::serve(Arc::new(broker), addr)?)
}

fn serve_store(data_dir: &Path, addr: SocketAddr) -> Result<StoreServer, HarnessError> {
    let store = Store::open(&data_dir.join(STORE_DIR)).map_err(|e| HarnessError::Startup(format!("store: {e}")))?;
    Ok(store::serve(Arc::new(store), addr)?)
}

fn start_consumer(broker: SocketAddr, store: SocketAddr) -> Result<ConsumerHandle, HarnessError> {
    let consumer = Consumer::new(
        Arc::new(BrokerClient::new(broker)?),
        Arc::new(StoreClient::new(store)?),
        ConsumerConfig::default(),
    );
    Ok(ConsumerHandle::spawn(consumer)?)
}

fn sleep_until(deadline: Instant) {
    let now = Instant::now();
    if deadline > now {
        thread::sleep(deadline - now);
    }
}

impl Driver<'_> {
    fn run(&mut self) -> Result<(), HarnessError> {
        let late = self.spec.late_joiners();
        let mut faults = self.spec.faults.clone();
        faults.sort_by_key(|f| f.at);
        let started = Instant::now();
        for index in (0..self.spec.node_count).filter(|i| !late.contains_key(i)) {
            self.spawn(index, None)?;
        }
        for fault in &faults {
            sleep_until(started + Duration::from_secs(fault.at));
            self.apply(fault)?;
        }
        sleep_until(started + Duration::from_secs(self.spec.duration));
        Ok(())
    }

    fn spawn(&mut self, index: usize, joined_at: Option<Timestamp>) -> Result<(), HarnessError> {
        let (id, seed) = self.plans[index];
        let config = AgentConfig::new(id, index < self.spec.infected_count, self.spec.params.clone(), seed);
        let agent = NodeAgent::spawn(config, self.clock.now());
        let transport: Arc<dyn Transport> = match self.spec.transport.mode {
            TransportMode::Udp => Arc::new(UdpTransport::bind(&self.spec.transport, id).map_err(startup)?),
            TransportMode::InMemory => {
                Arc::new(self.network.register_peer(id, agent.position_source()).map_err(startup)?)
            }
        };
        let broker = Arc::new(BrokerClient::new(self.broker_addr)?);
        let handle = runner::spawn(agent, transport, broker, self.clock.clone())?;
        self.running.push(RunningNode { index, handle, joined_at });
        Ok(())
    }

    fn broker_counts(&self) -> Option<(u64, u64)> {
        self.broker.as_ref().map(|b| {
            let broker = b.broker();
            (broker.retained_count_for(DEFAULT_TOPIC, STORE_CONSUMER_GROUP), broker.len(DEFAULT_TOPIC))
        })
    }

    fn apply(&mut self, fault: &FaultEvent) -> Result<(), HarnessError> {
        tracing::info!(%fault, "injecting fault");
        let now = self.clock.now();
        match (fault.target, fault.action) {
            (FaultTarget::Broker, FaultAction::Kill) => {
                if let Some(server) = self.broker.take() {
                    server.kill();
                }
                self.broker_down_since = Some(now);
            }
            (FaultTarget::Broker, FaultAction::Restore) => {
                self.broker = Some(serve_broker(self.data_dir, self.broker_addr)?);
                if let Some(down) = self.broker_down_since.take() {
                    self.outcome.broker_outages.push((down, now));
                }
            }
            (FaultTarget::Store, FaultAction::Kill) => {
                if let Some(server) = self.store.take() {
                    server.kill();
                }
                self.outcome.store_outages += 1;
                if let Some(addr) = self.api_addr.filter(|_| self.api.is_some()) {
                    self.outcome.live_checks.push(probe_data_unavailable(addr, fault));
                }
            }
            (FaultTarget::Store, FaultAction::Restore) => {
                self.store = Some(serve_store(self.data_dir, self.store_addr)?);
                if let Some(addr) = self.api_addr.filter(|_| self.api.is_some()) {
                    self.outcome.live_checks.push(probe_status(addr, "/data", 200, fault));
                }
            }
            (FaultTarget::Consumer, FaultAction::Kill) => {
                if let Some(consumer) = self.consumer.take() {
                    consumer.kill();
                }
                self.consumer_down =
                    self.broker_counts().map(|(retained, len)| (fault.to_string(), retained, len));
            }
            (FaultTarget::Consumer, FaultAction::Restore) => {
                self.close_consumer_window();
                self.consumer = Some(start_consumer(self.broker_addr, self.store_addr)?);
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
                    self.api = Some(api::serve(Arc::new(StoreClient::new(self.store_addr)?), addr)?);
                    self.outcome.live_checks.push(probe_status(addr, "/health", 200, fault));
                }
            }
            (FaultTarget::Node(index), FaultAction::Kill) => {
                if let Some(pos) = self.running.iter().position(|n| n.index == index) {
                    let node = self.running.remove(pos);
                    let agent = node.handle.kill();
                    self.finished.push(NodeOutcome { index, agent, killed_at: Some(now), joined_at: node.joined_at });
                }
            }
            (FaultTarget::Node(index), FaultAction::Add) => self.spawn(index, Some(now))?,
            (target, action) => {
                return Err(HarnessError::InvalidSpec(format!("unsupported fault {action:?} for {target}")))
            }
        }
        Ok(())
    }

    fn close_consumer_window(&mut self) {
        if let (Some((label, retained_at_kill, len_at_kill)), Some((retained, len))) =
            (self.consumer_down.take(), self.broker_counts())
        {
            self.outcome.consumer_windows.push(ConsumerWindow {
                label,
                retained_at_kill,
                retained_at_restore: retained,
                published_during: len - len_at_kill,
            });
        }
    }

    /// Waits for the consumer to commit every sealed batch on the log.
    fn catch_up(&self) {
        let Some(server) = &self.broker else { return };
        let broker = server.broker();
        let mut batcher = Batcher::starting_at(0);
        let mut sealed_through = 0;
        for record in broker.read_from(DEFAULT_TOPIC, 0, usize::MAX) {
            if let Some(batch) = batcher.push(&record) {
                sealed_through = batch.last_offset + 1;
            }
        }
        let deadline = Instant::now() + CATCH_UP_LIMIT;
        while broker.committed(DEFAULT_TOPIC, STORE_CONSUMER_GROUP) < sealed_through && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(50));
        }
    }

    fn finish(&mut self) -> RunOutcome {
        let end = self.clock.now();
        for node in std::mem::take(&mut self.running) {
            let agent = node.handle.kill();
            self.finished.push(NodeOutcome { index: node.index, agent, killed_at: None, joined_at: node.joined_at });
        }
        if let Some(down) = self.broker_down_since.take() {
            self.outcome.broker_outages.push((down, end));
        }
        self.close_consumer_window();
        let up = self.broker.is_some() && self.store.is_some() && self.consumer.is_some();
        if up {
            self.catch_up();
        }
        self.outcome.pipeline_up_at_end = up;
        if let Some(c) = self.consumer.take() {
            c.kill();
        }
        if let Some(a) = self.api.take() {
            a.kill();
        }
        if let Some(s) = self.store.take() {
            s.kill();
        }
        if let Some(b) = self.broker.take() {
            b.kill();
        }
        let mut nodes = std::mem::take(&mut self.finished);
        nodes.sort_by_key(|n| n.index);
        let mut outcome = std::mem::replace(
            &mut self.outcome,
            RunOutcome {
                nodes: Vec::new(),
                broker_outages: Vec::new(),
                consumer_windows: Vec::new(),
                store_outages: 0,
                live_checks: Vec::new(),
                pipeline_up_at_end: false,
            },
        );
        outcome.nodes = nodes;
        outcome
    }
}

fn startup(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Startup(e.to_string())
}
