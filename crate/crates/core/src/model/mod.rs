//! Domain types shared by every component: run parameters, node identity,
//! grid positions, the infection state machine, statistics and the JSON
//! wire messages.

mod geometry;
mod health;
mod time;
pub mod wire;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use uuid::Uuid;

pub use geometry::{in_infection_range, step_position};
pub use health::{is_stationary, update_health, HealthPhase};
pub use time::{Clock, SimClock, SystemClock, Timestamp, TimestampError};
pub use wire::{BroadcastMessage, ContactRecord, DecodeError, ReportMessage};

/// The six knobs of a simulation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunParameters {
    pub field_width: u32,
    pub field_height: u32,
    /// Display-only; carried to exported frames.
    pub scale_factor: u32,
    /// Lifetime of every node, in seconds.
    pub zombie_lifetime: u64,
    #[serde(serialize_with = "serialize_radius")]
    pub infection_radius: f64,
    /// Seconds an infected node stays put; also the length of the immunity window.
    pub infection_cooldown: u64,
}

fn serialize_radius<S: Serializer>(radius: &f64, serializer: S) -> Result<S::Ok, S::Error> {
    if radius.fract() == 0.0 && radius.abs() < 1e15 {
        serializer.serialize_i64(*radius as i64)
    } else {
        serializer.serialize_f64(*radius)
    }
}

impl Default for RunParameters {
    fn default() -> Self {
        RunParameters {
            field_width: 100,
            field_height: 100,
            scale_factor: 5,
            zombie_lifetime: 120,
            infection_radius: 2.0,
            infection_cooldown: 15,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("{field} must be {requirement}")]
    Invalid {
        field: &'static str,
        requirement: &'static str,
    },
    #[error("reading parameters file: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing parameters file: {0}")]
    Json(#[from] serde_json::Error),
}

impl RunParameters {
    pub fn validate(&self) -> Result<(), ParamError> {
        let check = |ok: bool, field, requirement| {
            if ok {
                Ok(())
            } else {
                Err(ParamError::Invalid { field, requirement })
            }
        };
        check(self.field_width >= 1, "field_width", ">= 1")?;
        check(self.field_height >= 1, "field_height", ">= 1")?;
        check(self.scale_factor >= 1, "scale_factor", ">= 1")?;
        check(self.zombie_lifetime >= 1, "zombie_lifetime", ">= 1")?;
        check(self.infection_cooldown >= 1, "infection_cooldown", ">= 1")?;
        check(
            self.infection_radius.is_finite() && self.infection_radius >= 0.0,
            "infection_radius",
            "a finite number >= 0",
        )
    }

    pub fn from_json(text: &str) -> Result<Self, ParamError> {
        let params: RunParameters = serde_json::from_str(text)?;
        params.validate()?;
        Ok(params)
    }

    pub fn load(path: &Path) -> Result<Self, ParamError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn contains(&self, p: Position) -> bool {
        p.x < self.field_width && p.y < self.field_height
    }
}

/// 128-bit node identity, rendered as the canonical hyphenated UUID.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(Uuid);

impl NodeId {
    pub fn random() -> Self {
        NodeId(Uuid::new_v4())
    }

    /// Builds a version-4 id from caller-supplied entropy (seeded runs).
    pub fn from_random_bytes(bytes: [u8; 16]) -> Self {
        NodeId(uuid::Builder::from_random_bytes(bytes).into_uuid())
    }

    pub fn as_uuid(&self) -> &Uuid {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.hyphenated())
    }
}

impl FromStr for NodeId {
    type Err = uuid::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Uuid::parse_str(s).map(NodeId)
    }
}

impl Serialize for NodeId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Grid cell; serialized as a two-element array `[x, y]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Position {
    pub x: u32,
    pub y: u32,
}

impl Position {
    pub const fn new(x: u32, y: u32) -> Self {
        Position { x, y }
    }

    pub fn pack(self) -> u64 {
        (u64::from(self.x) << 32) | u64::from(self.y)
    }

    pub fn unpack(packed: u64) -> Self {
        Position::new((packed >> 32) as u32, packed as u32)
    }
}

impl Serialize for Position {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        [self.x, self.y].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Position {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [x, y] = <[u32; 2]>::deserialize(deserializer)?;
        Ok(Position { x, y })
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// The four dashboard counters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Stats {
    pub total_nodes: u64,
    pub zombies: u64,
    pub deaths: u64,
    pub dead_zombies: u64,
}

/// Anything that carries a node's latest infected/alive flags.
pub trait NodeStatus {
    fn infected(&self) -> bool;
    fn alive(&self) -> bool;
}

/// Counts over the latest document of each node. Zombies are all infected
/// nodes, dead or alive.
pub fn compute_stats<'a, D, I>(docs: I) -> Stats
where
    D: NodeStatus + 'a,
    I: IntoIterator<Item = &'a D>,
{
    docs.into_iter().fold(Stats::default(), |mut stats, doc| {
        stats.total_nodes += 1;
        if doc.infected() {
            stats.zombies += 1;
        }
        if !doc.alive() {
            stats.deaths += 1;
            if doc.infected() {
                stats.dead_zombies += 1;
            }
        }
        stats
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Doc(bool, bool);

    impl NodeStatus for Doc {
        fn infected(&self) -> bool {
            self.0
        }
        fn alive(&self) -> bool {
            self.1
        }
    }

    #[test]
    fn default_parameters() {
        let p = RunParameters::default();
        assert_eq!(
            (p.field_width, p.field_height, p.scale_factor, p.zombie_lifetime),
            (100, 100, 5, 120)
        );
        assert_eq!(p.infection_radius, 2.0);
        assert_eq!(p.infection_cooldown, 15);
    }

    #[test]
    fn parameters_json_matches_listing_shape() {
        let text = serde_json::to_string(&RunParameters::default()).unwrap();
        assert_eq!(
            text,
            r#"{"field_width":100,"field_height":100,"scale_factor":5,"zombie_lifetime":120,"infection_radius":2,"infection_cooldown":15}"#
        );
        let listing = r#"{
            "field_width" : 100,
            "field_height" : 100,
            "scale_factor" : 5,
            "zombie_lifetime" : 120,
            "infection_radius" : 2,
            "infection_cooldown" : 15
        }"#;
        assert_eq!(RunParameters::from_json(listing).unwrap(), RunParameters::default());
    }

    #[test]
    fn parameter_validation() {
        let p = RunParameters { infection_cooldown: 0, ..RunParameters::default() };
        assert!(matches!(
            p.validate(),
            Err(ParamError::Invalid { field: "infection_cooldown", .. })
        ));
        assert!(RunParameters { infection_radius: -1.0, ..RunParameters::default() }.validate().is_err());
        assert!(RunParameters { field_width: 0, ..RunParameters::default() }.validate().is_err());
    }

    #[test]
    fn stats_fixtures() {
        assert_eq!(compute_stats::<Doc, _>(&[]), Stats::default());
        let docs = [Doc(true, true), Doc(false, false), Doc(true, false)];
        assert_eq!(
            compute_stats(&docs),
            Stats { total_nodes: 3, zombies: 2, deaths: 2, dead_zombies: 1 }
        );
        let healthy: Vec<Doc> = (0..20).map(|_| Doc(false, true)).collect();
        assert_eq!(
            compute_stats(&healthy),
            Stats { total_nodes: 20, zombies: 0, deaths: 0, dead_zombies: 0 }
        );
    }

    #[test]
    fn node_id_is_canonical() {
        let id = NodeId::from_random_bytes([7; 16]);
        let text = id.to_string();
        assert_eq!(text.len(), 36);
        assert_eq!(text.parse::<NodeId>().unwrap(), id);
    }

    proptest! {
        #[test]
        fn stats_are_permutation_invariant(
            flags in proptest::collection::vec((any::<bool>(), any::<bool>()), 0..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let docs: Vec<Doc> = flags.iter().map(|&(i, a)| Doc(i, a)).collect();
            let mut shuffled: Vec<Doc> = flags.iter().map(|&(i, a)| Doc(i, a)).collect();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let stats = compute_stats(&docs);
            prop_assert_eq!(stats, compute_stats(&shuffled));
            prop_assert!(stats.zombies <= stats.total_nodes);
            prop_assert!(stats.dead_zombies <= stats.deaths);
            prop_assert!(stats.deaths <= stats.total_nodes);
        }
    }
}
