//! Time sources.
//!
//! Every component takes an `Arc<dyn Clock>` so the harness can swap the wall
//! clock for a [`SimClock`] and drive timeouts deterministically.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicI64, Ordering};
use std::time::Duration;

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};

/// Milliseconds since the Unix epoch, UTC.
///
/// Rendered on the wire as ISO-8601 with a trailing `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const fn from_millis(ms: i64) -> Self {
        Timestamp(ms)
    }

    pub const fn from_secs(s: i64) -> Self {
        Timestamp(s * 1000)
    }

    pub const fn as_millis(self) -> i64 {
        self.0
    }

    pub fn saturating_add(self, d: Duration) -> Self {
        Timestamp(self.0.saturating_add(d.as_millis() as i64))
    }

    /// Elapsed time from `earlier` to `self`, zero if `earlier` is later.
    pub fn since(self, earlier: Timestamp) -> Duration {
        Duration::from_millis(self.0.saturating_sub(earlier.0).max(0) as u64)
    }

    fn to_datetime(self) -> DateTime<Utc> {
        Utc.timestamp_millis_opt(self.0)
            .single()
            .unwrap_or_else(|| Utc.timestamp_millis_opt(0).unwrap())
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fmt = if self.0 % 1000 == 0 {
            SecondsFormat::Secs
        } else {
            SecondsFormat::Millis
        };
        f.write_str(&self.to_datetime().to_rfc3339_opts(fmt, true))
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid ISO-8601 UTC timestamp `{0}`")]
pub struct TimestampError(String);

impl FromStr for Timestamp {
    type Err = TimestampError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if !s.ends_with('Z') {
            return Err(TimestampError(s.to_owned()));
        }
        DateTime::parse_from_rfc3339(s)
            .map(|dt| Timestamp(dt.timestamp_millis()))
            .map_err(|_| TimestampError(s.to_owned()))
    }
}

pub trait Clock: Send + Sync + fmt::Debug {
    fn now(&self) -> Timestamp;

    /// Block for `d`. Simulated clocks advance instead of sleeping.
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp(Utc::now().timestamp_millis())
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// A manually driven clock shared by every node in a simulated mesh.
#[derive(Debug)]
pub struct SimClock {
    now_ms: AtomicI64,
}

impl SimClock {
    pub fn new(start: Timestamp) -> Self {
        SimClock {
            now_ms: AtomicI64::new(start.as_millis()),
        }
    }

    pub fn advance(&self, d: Duration) {
        self.now_ms.fetch_add(d.as_millis() as i64, Ordering::SeqCst);
    }

    pub fn set(&self, t: Timestamp) {
        self.now_ms.store(t.as_millis(), Ordering::SeqCst);
    }
}

impl Default for SimClock {
    /// 2000-01-01T00:00:00Z.
    fn default() -> Self {
        SimClock::new(Timestamp::from_secs(946_684_800))
    }
}

impl Clock for SimClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.now_ms.load(Ordering::SeqCst))
    }

    fn sleep(&self, d: Duration) {
        self.advance(d);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamp_renders_iso8601_utc() {
        assert_eq!(
            Timestamp::from_secs(946_684_800).to_string(),
            "2000-01-01T00:00:00Z"
        );
        assert_eq!(
            Timestamp::from_millis(946_684_800_250).to_string(),
            "2000-01-01T00:00:00.250Z"
        );
    }

    #[test]
    fn timestamp_parse_requires_utc_designator() {
        let t: Timestamp = "2000-01-01T00:00:00Z".parse().unwrap();
        assert_eq!(t, Timestamp::from_secs(946_684_800));
        assert!("2000-01-01T00:00:00+01:00".parse::<Timestamp>().is_err());
        assert!("yesterday".parse::<Timestamp>().is_err());
    }

    #[test]
    fn sim_clock_sleep_advances() {
        let c = SimClock::default();
        let t0 = c.now();
        c.sleep(Duration::from_secs(2));
        assert_eq!(c.now().since(t0), Duration::from_secs(2));
        assert_eq!(t0.since(c.now()), Duration::ZERO);
    }
}
