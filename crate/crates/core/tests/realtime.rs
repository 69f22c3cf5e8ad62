//! Wall-clock runs over real sockets: UDP broadcast between node threads, and
//! the broker and store behind TCP.

use std::net::{Ipv4Addr, UdpSocket};

use ctsim::harness::{self, FaultEvent, RunMode, RunSpec};
use ctsim::model::RunParameters;
use ctsim::transport::{TransportConfig, TransportMode};

fn udp() -> TransportConfig {
    TransportConfig {
        mode: TransportMode::Udp,
        broadcast_port: UdpSocket::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port(),
        broadcast_address: Ipv4Addr::new(127, 255, 255, 255).into(),
        ..TransportConfig::default()
    }
}

fn spec(faults: &[&str]) -> RunSpec {
    RunSpec {
        params: RunParameters { field_width: 5, field_height: 5, zombie_lifetime: 4, ..RunParameters::default() },
        node_count: 3,
        infected_count: 1,
        duration: 6,
        seed: 11,
        transport: udp(),
        faults: faults.iter().map(|f| f.parse::<FaultEvent>().unwrap()).collect(),
        mode: RunMode::Realtime,
        api: true,
    }
}

fn assert_passes(spec: &RunSpec) -> harness::RunReport {
    let dir = tempfile::tempdir().unwrap();
    let report = harness::run(spec, dir.path()).unwrap();
    let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    report
}

#[test]
fn nodes_live_meet_and_die_over_udp() {
    let report = assert_passes(&spec(&[]));
    assert_eq!(report.stats.total_nodes, 3);
    assert_eq!(report.stats.deaths, 3);
    assert!(report.traffic.max_broadcast().is_some_and(|b| b > 0));
}

#[test]
fn broker_outage_over_real_sockets_loses_only_the_gap() {
    let report = assert_passes(&spec(&["2:broker:kill", "3:broker:restore", "3:api:kill", "4:api:restore"]));
    assert!(report.check("movement_loss[0]").is_some());
}
