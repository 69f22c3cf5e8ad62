//! Byte accounting for broadcasts and reports, compared with the figures the
//! original deployment measured.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agent::AgentMetrics;

/// Per-datagram header overhead assumed for every message (189 B framed
/// minus 148 B payload in the reference measurement).
pub const HEADER_OVERHEAD_BYTES: u64 = 41;

pub const REFERENCE_BROADCAST_PAYLOAD: f64 = 148.0;
pub const REFERENCE_BROADCAST_FRAMED: f64 = 189.0;
pub const REFERENCE_WORST_CASE_REPORT: f64 = 2490.0;
pub const REFERENCE_TOTAL_20_NODES_120_S: f64 = 6_430_000.0;
pub const EXTRAPOLATION_NODES: u64 = 20;
pub const EXTRAPOLATION_SECONDS: u64 = 120;

/// One measured-versus-reference line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub quantity: String,
    pub measured: f64,
    pub reference: f64,
    pub low: f64,
    pub high: f64,
    pub within: bool,
}

impl ReferenceRow {
    fn new(quantity: &str, measured: f64, reference: f64, low: f64, high: f64) -> Self {
        ReferenceRow {
            quantity: quantity.to_string(),
            measured,
            reference,
            low,
            high,
            within: (low..=high).contains(&measured),
        }
    }

    fn relative(quantity: &str, measured: f64, reference: f64, tolerance: f64) -> Self {
        Self::new(quantity, measured, reference, reference * (1.0 - tolerance), reference * (1.0 + tolerance))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrafficMetrics {
    /// Payload size to message count.
    pub broadcast_payload_bytes: BTreeMap<usize, u64>,
    pub report_payload_bytes: BTreeMap<usize, u64>,
    pub header_overhead_bytes: u64,
    pub total_bytes_sent: u64,
    /// Ticks summed over nodes; one broadcast per node per tick.
    pub node_seconds: u64,
    pub per_node_per_second_bytes: f64,
    pub comparison: Vec<ReferenceRow>,
}

impl TrafficMetrics {
    pub fn max_broadcast(&self) -> Option<usize> {
        self.broadcast_payload_bytes.keys().next_back().copied()
    }

    pub fn max_report(&self) -> Option<usize> {
        self.report_payload_bytes.keys().next_back().copied()
    }

    /// Total for the reference deployment size at the measured rate.
    pub fn extrapolated_total(&self) -> f64 {
        (EXTRAPOLATION_NODES * EXTRAPOLATION_SECONDS) as f64 * self.per_node_per_second_bytes
    }

    pub fn row(&self, quantity: &str) -> Option<&ReferenceRow> {
        self.comparison.iter().find(|r| r.quantity == quantity)
    }
}

/// Aggregates the per-agent size records of a run. Only successfully
/// published reports count; failed attempts never left the node.
pub fn measure_traffic<'a>(agents: impl IntoIterator<Item = &'a AgentMetrics>) -> TrafficMetrics {
    let mut m = TrafficMetrics { header_overhead_bytes: HEADER_OVERHEAD_BYTES, ..TrafficMetrics::default() };
    for agent in agents {
        for &size in &agent.broadcast_sizes {
            *m.broadcast_payload_bytes.entry(size).or_default() += 1;
            m.total_bytes_sent += size as u64 + HEADER_OVERHEAD_BYTES;
        }
        for &size in &agent.report_sizes {
            *m.report_payload_bytes.entry(size).or_default() += 1;
            m.total_bytes_sent += size as u64 + HEADER_OVERHEAD_BYTES;
        }
        m.node_seconds += agent.broadcast_sizes.len() as u64;
    }
    if m.node_seconds > 0 {
        m.per_node_per_second_bytes = m.total_bytes_sent as f64 / m.node_seconds as f64;
    }
    if let Some(b) = m.max_broadcast() {
        m.comparison.push(ReferenceRow::new("broadcast_payload", b as f64, REFERENCE_BROADCAST_PAYLOAD, 128.0, 168.0));
        let framed = (b as u64 + HEADER_OVERHEAD_BYTES) as f64;
        m.comparison.push(ReferenceRow::new("broadcast_framed", framed, REFERENCE_BROADCAST_FRAMED, 169.0, 209.0));
    }
    if let Some(r) = m.max_report() {
        m.comparison.push(ReferenceRow::relative("max_report_payload", r as f64, REFERENCE_WORST_CASE_REPORT, 0.2));
    }
    if m.node_seconds > 0 {
        let total = m.extrapolated_total();
        m.comparison.push(ReferenceRow::relative("total_20_nodes_120_s", total, REFERENCE_TOTAL_20_NODES_120_S, 0.2));
    }
    m
}
