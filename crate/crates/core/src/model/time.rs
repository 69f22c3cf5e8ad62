use std::fmt;
use std::str::FromStr;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

const TEXT_FORMAT: &str = "%Y-%m-%d %H:%M:%S%.6f";
const MICROS_PER_SEC: i64 = 1_000_000;

/// Wall-clock instant at microsecond resolution, rendered as
/// `YYYY-MM-DD HH:MM:SS.ffffff` (UTC).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(i64);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid timestamp {0:?}")]
pub struct TimestampError(pub String);

impl Timestamp {
    pub const fn from_unix_micros(micros: i64) -> Self {
        Timestamp(micros)
    }

    pub const fn unix_micros(self) -> i64 {
        self.0
    }

    pub fn now() -> Self {
        let since = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or(Duration::ZERO);
        Timestamp(since.as_micros() as i64)
    }

    pub fn plus_secs(self, secs: u64) -> Self {
        Timestamp(self.0 + secs as i64 * MICROS_PER_SEC)
    }

    pub fn plus_micros(self, micros: i64) -> Self {
        Timestamp(self.0 + micros)
    }

    /// Signed microseconds from `origin` to `self`.
    pub fn micros_since(self, origin: Timestamp) -> i64 {
        self.0 - origin.0
    }

    /// Seconds elapsed since `origin`, at microsecond resolution.
    pub fn secs_since(self, origin: Timestamp) -> f64 {
        self.micros_since(origin) as f64 / MICROS_PER_SEC as f64
    }

    /// True when at least `secs` whole seconds separate `earlier` and `self`.
    pub fn has_elapsed(self, earlier: Timestamp, secs: u64) -> bool {
        self.micros_since(earlier) >= secs as i64 * MICROS_PER_SEC
    }

    pub fn parse(text: &str) -> Result<Self, TimestampError> {
        // A missing fraction is accepted; Python's str(datetime) drops it at .000000.
        let parsed = NaiveDateTime::parse_from_str(text, "%Y-%m-%d %H:%M:%S%.f")
            .map_err(|_| TimestampError(text.to_string()))?;
        Ok(Timestamp(parsed.and_utc().timestamp_micros()))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match DateTime::from_timestamp_micros(self.0) {
            Some(dt) => write!(f, "{}", dt.naive_utc().format(TEXT_FORMAT)),
            None => write!(f, "<out of range: {}us>", self.0),
        }
    }
}

impl FromStr for Timestamp {
    type Err = TimestampError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Timestamp::parse(s)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Timestamp::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// Source of the current instant. The deterministic driver shares one
/// [`SimClock`] among every component; realtime runs use [`SystemClock`].
pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp::now()
    }
}

/// Manually advanced clock.
#[derive(Debug)]
pub struct SimClock {
    micros: std::sync::atomic::AtomicI64,
}

impl SimClock {
    pub fn starting_at(start: Timestamp) -> Self {
        SimClock {
            micros: std::sync::atomic::AtomicI64::new(start.unix_micros()),
        }
    }

    pub fn advance_secs(&self, secs: u64) {
        self.micros.fetch_add(
            secs as i64 * MICROS_PER_SEC,
            std::sync::atomic::Ordering::SeqCst,
        );
    }
}

impl Clock for SimClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.micros.load(std::sync::atomic::Ordering::SeqCst))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn renders_full_precision() {
        let ts = Timestamp::parse("2020-12-02 16:19:07.123456").unwrap();
        assert_eq!(ts.to_string(), "2020-12-02 16:19:07.123456");
        assert_eq!(ts.to_string().len(), 26);
    }

    #[test]
    fn whole_seconds_keep_six_fraction_digits() {
        let ts = Timestamp::parse("2020-12-02 16:19:07").unwrap();
        assert_eq!(ts.to_string(), "2020-12-02 16:19:07.000000");
    }

    #[test]
    fn rejects_garbage() {
        assert!(Timestamp::parse("yesterday").is_err());
        assert!(Timestamp::parse("2020-13-02 16:19:07").is_err());
    }

    #[test]
    fn elapsed_is_inclusive() {
        let t0 = Timestamp::from_unix_micros(0);
        assert!(t0.plus_secs(15).has_elapsed(t0, 15));
        assert!(!t0.plus_micros(14_999_999).has_elapsed(t0, 15));
    }

    proptest! {
        #[test]
        fn text_round_trip(micros in 0i64..4_102_444_800_000_000) {
            let ts = Timestamp::from_unix_micros(micros);
            prop_assert_eq!(Timestamp::parse(&ts.to_string()).unwrap(), ts);
        }
    }
}
