//! Realtime agent: control, broadcast, listen and broker-monitor threads
//! sharing one [`NodeAgent`] behind a mutex. No lock is held across a
//! network call.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::{Lifecycle, NodeAgent};
use crate::broker::BrokerLink;
use crate::model::Clock;
use crate::transport::{Transport, TransportError};

const LISTEN_POLL: Duration = Duration::from_millis(100);

pub struct AgentHandle {
    agent: Arc<Mutex<NodeAgent>>,
    transport: Arc<dyn Transport>,
    stop: Arc<AtomicBool>,
    killed: Arc<AtomicBool>,
    broker_available: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl AgentHandle {
    pub fn agent(&self) -> MutexGuard<'_, NodeAgent> {
        lock(&self.agent)
    }

    pub fn broker_available(&self) -> bool {
        self.broker_available.load(Ordering::SeqCst)
    }

    pub fn is_finished(&self) -> bool {
        self.threads.iter().all(|t| t.is_finished())
    }

    /// Unexpected shutdown: threads stop where they are and no final message is sent.
    pub fn kill(self) -> NodeAgent {
        self.killed.store(true, Ordering::SeqCst);
        self.stop.store(true, Ordering::SeqCst);
        self.transport.close();
        self.join()
    }

    /// Waits for a natural death (or any other termination).
    pub fn wait(self) -> NodeAgent {
        self.join()
    }

    fn join(self) -> NodeAgent {
        for t in self.threads {
            let _ = t.join();
        }
        match Arc::try_unwrap(self.agent) {
            Ok(agent) => agent.into_inner().unwrap_or_else(|p| p.into_inner()),
            Err(_) => unreachable!("agent threads have exited"),
        }
    }
}

fn lock(agent: &Mutex<NodeAgent>) -> MutexGuard<'_, NodeAgent> {
    agent.lock().unwrap_or_else(|p| p.into_inner())
}

fn sleep_until(deadline: Instant, stop: &AtomicBool) {
    while !stop.load(Ordering::SeqCst) {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        thread::sleep((deadline - now).min(Duration::from_millis(20)));
    }
}

/// Starts the four agent threads for an already placed agent. Its first tick
/// runs immediately. The transport should be attached to the agent's
/// [`NodeAgent::position_source`] where reachability depends on position.
pub fn spawn(
    agent: NodeAgent,
    transport: Arc<dyn Transport>,
    broker: Arc<dyn BrokerLink>,
    clock: Arc<dyn Clock>,
) -> std::io::Result<AgentHandle> {
    let tick = agent.config().tick_interval;
    let topic = agent.config().topic.clone();
    let id = agent.id();
    let agent = Arc::new(Mutex::new(agent));
    let stop = Arc::new(AtomicBool::new(false));
    let killed = Arc::new(AtomicBool::new(false));
    let available = Arc::new(AtomicBool::new(broker.probe().is_ok()));
    let (to_broadcaster, outgoing) = mpsc::channel::<Vec<u8>>();
    tracing::info!(node = %id, position = %lock(&agent).state.position, "node spawned");

    let mut threads = Vec::new();

    threads.push({
        let transport = transport.clone();
        thread::Builder::new().name(format!("bcast-{id}")).spawn(move || {
            for payload in outgoing {
                if let Err(e) = transport.broadcast(&payload) {
                    tracing::warn!(node = %id, "broadcast failed: {e}");
                }
            }
        })?
    });

    threads.push({
        let (agent, transport, stop, killed, clock) =
            (agent.clone(), transport.clone(), stop.clone(), killed.clone(), clock.clone());
        thread::Builder::new().name(format!("listen-{id}")).spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                match transport.receive(LISTEN_POLL) {
                    Ok(Some(datagram)) => {
                        let now = clock.now();
                        match lock(&agent).on_datagram(&datagram.payload, now) {
                            Ok(Some(msg)) => tracing::info!(
                                node = %id, from = %datagram.from, peer = %msg.uuid,
                                infected = msg.infected, "heard broadcast"
                            ),
                            Ok(None) => {}
                            Err(e) => tracing::debug!(node = %id, from = %datagram.from, "dropped datagram: {e}"),
                        }
                    }
                    Ok(None) => {}
                    Err(TransportError::Closed) => return,
                    Err(e) => {
                        tracing::error!(node = %id, "transport failed, shutting down: {e}");
                        killed.store(true, Ordering::SeqCst);
                        stop.store(true, Ordering::SeqCst);
                        return;
                    }
                }
            }
        })?
    });

    threads.push({
        let (broker, stop, available) = (broker.clone(), stop.clone(), available.clone());
        thread::Builder::new().name(format!("monitor-{id}")).spawn(move || {
            let mut next = Instant::now();
            while !stop.load(Ordering::SeqCst) {
                let up = broker.probe().is_ok();
                if available.swap(up, Ordering::SeqCst) != up {
                    tracing::info!(node = %id, up, "broker availability changed");
                }
                next += tick;
                sleep_until(next, &stop);
            }
        })?
    });

    threads.push({
        let (agent, stop, killed, available, transport) =
            (agent.clone(), stop.clone(), killed.clone(), available.clone(), transport.clone());
        thread::Builder::new().name(format!("control-{id}")).spawn(move || {
            let mut next = Instant::now();
            let mut final_broadcast_sent = false;
            loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let now = clock.now();
                let (broadcast, report) = {
                    let mut a = lock(&agent);
                    a.close_tick();
                    a.tick_health(now);
                    if a.lifetime_over(now) {
                        a.begin_dying();
                    }
                    let broadcast = match a.lifecycle() {
                        Lifecycle::Alive => {
                            a.step();
                            Some(a.encoded_broadcast(now))
                        }
                        _ if !final_broadcast_sent => {
                            final_broadcast_sent = true;
                            Some(a.encoded_broadcast(now))
                        }
                        _ => None,
                    };
                    (broadcast, a.next_report(now).encode())
                };
                if let Some(payload) = broadcast {
                    let _ = to_broadcaster.send(payload);
                }
                if killed.load(Ordering::SeqCst) {
                    break;
                }
                let published = available.load(Ordering::SeqCst) && broker.publish(&topic, &report).is_ok();
                {
                    let mut a = lock(&agent);
                    if published {
                        a.publish_succeeded(report.len());
                    } else {
                        available.store(false, Ordering::SeqCst);
                        a.publish_failed();
                    }
                    if a.lifecycle() == Lifecycle::Dead {
                        tracing::info!(node = %id, "final message published, exiting");
                        break;
                    }
                }
                next += tick;
                sleep_until(next, &stop);
            }
            stop.store(true, Ordering::SeqCst);
            drop(to_broadcaster);
            if !killed.load(Ordering::SeqCst) {
                // Let the broadcaster flush the final datagram before closing.
                thread::sleep(Duration::from_millis(20));
            }
            transport.close();
        })?
    });

    Ok(AgentHandle { agent, transport, stop, killed, broker_available: available, threads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::{Broker, BrokerLink};
    use crate::model::{ReportMessage, RunParameters, SystemClock};
    use crate::agent::AgentConfig;
    use crate::transport::{HearingRadius, MemoryNetwork};

    #[test]
    fn short_lived_node_publishes_then_dies() {
        let dir = tempfile::tempdir().unwrap();
        let broker = Arc::new(Broker::open(dir.path()).unwrap());
        let net = MemoryNetwork::new(HearingRadius::Unlimited, 0.0, 0);
        let params = RunParameters { zombie_lifetime: 1, ..RunParameters::default() };
        let mut config = AgentConfig::new(crate::model::NodeId::random(), false, params, 3);
        config.tick_interval = Duration::from_millis(500);
        let agent = NodeAgent::spawn(config, crate::model::Timestamp::now());
        let transport = Arc::new(net.register_peer(agent.id(), agent.position_source()).unwrap());
        let handle = spawn(agent, transport, broker.clone(), Arc::new(SystemClock)).unwrap();
        let deadline = Instant::now() + Duration::from_secs(5);
        while !handle.is_finished() && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(20));
        }
        assert!(handle.is_finished());
        let agent = handle.wait();
        assert_eq!(agent.lifecycle(), Lifecycle::Dead);
        let records = broker.poll("coronaz", "t", 100).unwrap();
        let reports: Vec<ReportMessage> =
            records.iter().map(|r| ReportMessage::decode(&r.payload).unwrap()).collect();
        assert!(reports.len() >= 2);
        assert!(reports[..reports.len() - 1].iter().all(|r| r.alive));
        assert!(!reports.last().unwrap().alive);
    }
}
