//! The per-node agent.
//!
//! [`NodeAgent`] holds all node logic without doing any I/O: the realtime
//! runner in [`runner`] drives it from four threads, the deterministic driver
//! in the harness drives it phase by phase on a simulated clock.

pub mod runner;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{
    in_infection_range, is_stationary, step_position, update_health, BroadcastMessage, ContactRecord,
    DecodeError, HealthPhase, NodeId, Position, ReportMessage, RunParameters, Timestamp,
};
use crate::transport::PositionSource;

#[derive(Clone, Debug)]
pub struct AgentConfig {
    pub id: NodeId,
    pub start_infected: bool,
    pub params: RunParameters,
    pub tick_interval: Duration,
    pub rng_seed: u64,
    pub topic: String,
}

impl AgentConfig {
    pub fn new(id: NodeId, start_infected: bool, params: RunParameters, rng_seed: u64) -> Self {
        AgentConfig {
            id,
            start_infected,
            params,
            tick_interval: Duration::from_secs(1),
            rng_seed,
            topic: crate::broker::DEFAULT_TOPIC.to_string(),
        }
    }
}

/// Contacts heard but not yet handed to a report.
#[derive(Clone, Debug, Default)]
pub struct ContactBuffer {
    /// Closed-out contacts, oldest first.
    pub pending: Vec<ContactRecord>,
    /// Latest message per peer within the current tick.
    pub last_heard: BTreeMap<NodeId, (Timestamp, BroadcastMessage)>,
}

/// Contacts that could not be published yet. Positions are never kept here:
/// whatever the node did while the broker was away is lost.
#[derive(Clone, Debug, Default)]
pub struct OutboundBuffer {
    pub carried_contacts: Vec<ContactRecord>,
    in_flight: Vec<ContactRecord>,
    pub failed_reports: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lifecycle {
    Alive,
    /// Lifetime exceeded; the final message has not reached the broker yet.
    Dying,
    Dead,
}

#[derive(Clone, Debug)]
pub struct NodeState {
    pub id: NodeId,
    pub position: Position,
    pub phase: HealthPhase,
    pub born_at: Timestamp,
    pub lifecycle: Lifecycle,
    pub contacts: ContactBuffer,
    pub outbound: OutboundBuffer,
}

/// Counters the harness reads after a run.
#[derive(Clone, Debug, Default)]
pub struct AgentMetrics {
    pub broadcast_sizes: Vec<usize>,
    pub report_sizes: Vec<usize>,
    pub malformed_messages: u64,
}

pub struct NodeAgent {
    config: AgentConfig,
    state: NodeState,
    rng: ChaCha8Rng,
    shared_position: Arc<AtomicU64>,
    /// Every contact ever closed out, for conservation checks.
    recorded: Vec<ContactRecord>,
    metrics: AgentMetrics,
}

impl NodeAgent {
    /// Places the node uniformly at random on the field.
    pub fn spawn(config: AgentConfig, now: Timestamp) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let position = Position::new(
            rng.random_range(0..config.params.field_width),
            rng.random_range(0..config.params.field_height),
        );
        let phase = if config.start_infected {
            HealthPhase::Infected { infected_at: now }
        } else {
            HealthPhase::Safe
        };
        NodeAgent {
            state: NodeState {
                id: config.id,
                position,
                phase,
                born_at: now,
                lifecycle: Lifecycle::Alive,
                contacts: ContactBuffer::default(),
                outbound: OutboundBuffer::default(),
            },
            shared_position: Arc::new(AtomicU64::new(position.pack())),
            config,
            rng,
            recorded: Vec::new(),
            metrics: AgentMetrics::default(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.config.id
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn state(&self) -> &NodeState {
        &self.state
    }

    pub fn metrics(&self) -> &AgentMetrics {
        &self.metrics
    }

    pub fn recorded_contacts(&self) -> &[ContactRecord] {
        &self.recorded
    }

    /// Contacts recorded but not yet on the broker.
    pub fn unpublished_contacts(&self) -> Vec<ContactRecord> {
        let out = &self.state.outbound;
        out.carried_contacts
            .iter()
            .chain(&out.in_flight)
            .chain(&self.state.contacts.pending)
            .cloned()
            .collect()
    }

    pub fn lifecycle(&self) -> Lifecycle {
        self.state.lifecycle
    }

    /// Live view of the position for in-memory reachability.
    pub fn position_source(&self) -> PositionSource {
        let cell = self.shared_position.clone();
        Arc::new(move || Position::unpack(cell.load(Ordering::SeqCst)))
    }

    /// Decodes and applies one datagram; undecodable ones are counted and dropped.
    pub fn on_datagram(&mut self, payload: &[u8], now: Timestamp) -> Result<Option<BroadcastMessage>, DecodeError> {
        let decoded = BroadcastMessage::decode(payload)
            .and_then(|m| m.check_bounds(&self.config.params).map(|()| m));
        match decoded {
            Ok(msg) if msg.uuid == self.config.id => Ok(None),
            Ok(msg) => {
                self.on_heard(msg.clone(), now);
                Ok(Some(msg))
            }
            Err(e) => {
                self.metrics.malformed_messages += 1;
                Err(e)
            }
        }
    }

    /// Records a heard broadcast; a later message from the same peer within
    /// the tick replaces the earlier one. An in-range infected sender infects
    /// a safe node immediately.
    pub fn on_heard(&mut self, msg: BroadcastMessage, now: Timestamp) {
        if msg.uuid == self.config.id || self.state.lifecycle != Lifecycle::Alive {
            return;
        }
        let exposed = msg.infected
            && in_infection_range(self.state.position, msg.position, self.config.params.infection_radius);
        self.state.contacts.last_heard.insert(msg.uuid, (now, msg));
        if exposed {
            self.state.phase = update_health(self.state.phase, now, true, &self.config.params);
        }
    }

    /// Closes the current tick: one contact per peer heard, oldest first.
    pub fn close_tick(&mut self) {
        let mut heard: Vec<ContactRecord> = std::mem::take(&mut self.state.contacts.last_heard)
            .into_iter()
            .map(|(uuid, (timestamp, _))| ContactRecord { uuid, timestamp })
            .collect();
        heard.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then(a.uuid.cmp(&b.uuid)));
        self.recorded.extend(heard.iter().cloned());
        self.state.contacts.pending.extend(heard);
    }

    /// Time-driven health transitions.
    pub fn tick_health(&mut self, now: Timestamp) {
        self.state.phase = update_health(self.state.phase, now, false, &self.config.params);
    }

    pub fn lifetime_over(&self, now: Timestamp) -> bool {
        now.has_elapsed(self.state.born_at, self.config.params.zombie_lifetime)
    }

    /// Moves one cell unless infected.
    pub fn step(&mut self) {
        if is_stationary(self.state.phase) {
            return;
        }
        self.state.position = step_position(self.state.position, &self.config.params, &mut self.rng);
        self.shared_position.store(self.state.position.pack(), Ordering::SeqCst);
    }

    /// Marks the node as dying; its final message goes out from now on.
    pub fn begin_dying(&mut self) {
        if self.state.lifecycle == Lifecycle::Alive {
            self.state.lifecycle = Lifecycle::Dying;
        }
    }

    pub fn broadcast_message(&self, now: Timestamp) -> BroadcastMessage {
        BroadcastMessage {
            uuid: self.config.id,
            position: self.state.position,
            infected: self.state.phase.is_infected(),
            timestamp: now,
            alive: self.state.lifecycle == Lifecycle::Alive,
        }
    }

    pub fn encoded_broadcast(&mut self, now: Timestamp) -> Vec<u8> {
        let payload = self.broadcast_message(now).encode();
        self.metrics.broadcast_sizes.push(payload.len());
        payload
    }

    /// Builds this tick's report. Its contacts move in flight until
    /// [`NodeAgent::publish_succeeded`] or [`NodeAgent::publish_failed`].
    pub fn next_report(&mut self, now: Timestamp) -> ReportMessage {
        let out = &mut self.state.outbound;
        let mut contacts = std::mem::take(&mut out.in_flight);
        contacts.append(&mut out.carried_contacts);
        contacts.append(&mut self.state.contacts.pending);
        out.in_flight = contacts.clone();
        self.broadcast_message(now).with_contacts(contacts)
    }

    pub fn publish_succeeded(&mut self, payload_len: usize) {
        self.state.outbound.in_flight.clear();
        self.metrics.report_sizes.push(payload_len);
        if self.state.lifecycle == Lifecycle::Dying {
            self.state.lifecycle = Lifecycle::Dead;
        }
    }

    /// Keeps the contacts for the next report and forgets the position.
    pub fn publish_failed(&mut self) {
        let out = &mut self.state.outbound;
        let mut carried = std::mem::take(&mut out.in_flight);
        carried.append(&mut out.carried_contacts);
        out.carried_contacts = carried;
        out.failed_reports += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T0: Timestamp = Timestamp::from_unix_micros(1_606_925_940_000_000);

    fn at(s: u64) -> Timestamp {
        T0.plus_secs(s)
    }

    fn agent(start_infected: bool) -> NodeAgent {
        let params = RunParameters { field_width: 10, field_height: 10, ..RunParameters::default() };
        NodeAgent::spawn(AgentConfig::new(NodeId::from_random_bytes([1; 16]), start_infected, params, 7), T0)
    }

    fn peer_msg(fill: u8, position: Position, infected: bool, ts: Timestamp) -> BroadcastMessage {
        BroadcastMessage { uuid: NodeId::from_random_bytes([fill; 16]), position, infected, timestamp: ts, alive: true }
    }

    #[test]
    fn duplicate_in_one_tick_keeps_later() {
        let mut a = agent(false);
        let p = a.state().position;
        a.on_heard(peer_msg(2, p, false, at(1)), at(1));
        a.on_heard(peer_msg(2, p, false, at(1)), at(1).plus_micros(400_000));
        a.close_tick();
        assert_eq!(a.state().contacts.pending.len(), 1);
        assert_eq!(a.state().contacts.pending[0].timestamp, at(1).plus_micros(400_000));
    }

    #[test]
    fn out_of_range_infected_peer_is_only_a_contact() {
        let mut a = agent(false);
        let p = a.state().position;
        let far = Position::new(if p.x >= 3 { p.x - 3 } else { p.x + 3 }, p.y);
        a.on_heard(peer_msg(2, far, true, at(1)), at(1));
        a.close_tick();
        assert_eq!(a.state().contacts.pending.len(), 1);
        assert_eq!(a.state().phase, HealthPhase::Safe);
    }

    #[test]
    fn in_range_infected_peer_infects() {
        let mut a = agent(false);
        let p = a.state().position;
        let near = Position::new(if p.x >= 1 { p.x - 1 } else { p.x + 1 }, p.y);
        a.on_heard(peer_msg(2, near, true, at(4)), at(4));
        assert_eq!(a.state().phase, HealthPhase::Infected { infected_at: at(4) });
    }

    #[test]
    fn own_messages_are_ignored() {
        let mut a = agent(false);
        let own = a.broadcast_message(at(0));
        a.on_heard(own, at(1));
        a.close_tick();
        assert!(a.state().contacts.pending.is_empty());
    }

    #[test]
    fn malformed_payload_is_counted() {
        let mut a = agent(false);
        assert!(a.on_datagram(b"garbage", at(1)).is_err());
        assert!(a.on_datagram(b"{}", at(1)).is_err());
        assert_eq!(a.metrics().malformed_messages, 2);
    }

    #[test]
    fn infected_node_does_not_move() {
        let mut a = agent(true);
        let start = a.state().position;
        for _ in 0..5 {
            a.step();
        }
        assert_eq!(a.state().position, start);
        let mut b = agent(false);
        b.step();
        assert_ne!(b.state().position, start);
    }

    #[test]
    fn failed_publish_carries_contacts_not_position() {
        let mut a = agent(false);
        let p = a.state().position;
        for (tick, fill) in [(3, 3u8), (4, 4), (5, 5)] {
            a.on_heard(peer_msg(fill, p, false, at(tick)), at(tick));
            a.close_tick();
            a.step();
            let _ = a.next_report(at(tick));
            a.publish_failed();
        }
        a.on_heard(peer_msg(6, p, false, at(6)), at(6));
        a.close_tick();
        a.step();
        let report = a.next_report(at(6));
        assert_eq!(report.position, a.state().position);
        assert_eq!(
            report.contacts.iter().map(|c| c.timestamp).collect::<Vec<_>>(),
            vec![at(3), at(4), at(5), at(6)]
        );
        a.publish_succeeded(0);
        assert!(a.next_report(at(7)).contacts.is_empty());
    }

    #[test]
    fn empty_tick_reports_no_contacts() {
        let mut a = agent(false);
        a.close_tick();
        assert!(a.next_report(at(0)).contacts.is_empty());
    }

    #[test]
    fn dying_flips_alive_and_ends_on_publish() {
        let mut a = agent(true);
        assert!(!a.lifetime_over(at(119)));
        assert!(a.lifetime_over(at(120)));
        a.begin_dying();
        let last = a.next_report(at(120));
        assert!(!last.alive);
        assert!(last.infected);
        a.publish_failed();
        assert_eq!(a.lifecycle(), Lifecycle::Dying);
        let _ = a.next_report(at(121));
        a.publish_succeeded(1);
        assert_eq!(a.lifecycle(), Lifecycle::Dead);
    }
}
