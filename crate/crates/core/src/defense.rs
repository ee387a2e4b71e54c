//! Device-side countermeasures: a cap on awake time without meaningful
//! traffic, and detection of frames that claim the receiver's own node id.

use std::collections::HashMap;
use std::fmt;
use std::time::Duration;

use serde::Serialize;

use crate::codec::MacFrame;
use crate::sim::SimTime;

pub const DEFAULT_MAX_AWAKE_WITHOUT_MEANINGFUL: Duration = Duration::from_secs(3);
pub const DEFAULT_ALERT_COOLDOWN: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpoofAction {
    AlertUser,
    /// Alert, then drop every non-encrypted frame for the given time.
    SuspiciousState { distrust_duration: Duration },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefensePolicy {
    MeaningfulPacketTimeout { max_awake_without_meaningful: Duration },
    SpoofDetection { action: SpoofAction },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum AlertKind {
    SpoofedSourceId,
    ForcedAwakeTimeout,
}

impl AlertKind {
    pub fn code(self) -> u8 {
        match self {
            AlertKind::SpoofedSourceId => 1,
            AlertKind::ForcedAwakeTimeout => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(AlertKind::SpoofedSourceId),
            2 => Some(AlertKind::ForcedAwakeTimeout),
            _ => None,
        }
    }
}

impl fmt::Display for AlertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlertKind::SpoofedSourceId => "SpoofedSourceId",
            AlertKind::ForcedAwakeTimeout => "ForcedAwakeTimeout",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AlertCause {
    SpoofedSourceId { frame_summary: String },
    ForcedAwakeTimeout,
}

impl AlertCause {
    pub fn kind(&self) -> AlertKind {
        match self {
            AlertCause::SpoofedSourceId { .. } => AlertKind::SpoofedSourceId,
            AlertCause::ForcedAwakeTimeout => AlertKind::ForcedAwakeTimeout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecurityAlert {
    pub time: SimTime,
    pub node: u8,
    pub cause: AlertCause,
}

/// Rate limiter: one alert per cause per cooldown window.
#[derive(Debug, Clone)]
pub struct AlertGate {
    cooldown: Duration,
    last: HashMap<AlertKind, SimTime>,
}

impl Default for AlertGate {
    fn default() -> Self {
        AlertGate::new(DEFAULT_ALERT_COOLDOWN)
    }
}

impl AlertGate {
    pub fn new(cooldown: Duration) -> Self {
        AlertGate {
            cooldown,
            last: HashMap::new(),
        }
    }

    pub fn admit(&mut self, kind: AlertKind, now: SimTime) -> bool {
        match self.last.get(&kind) {
            Some(&t) if now.since(t) < self.cooldown => false,
            _ => {
                self.last.insert(kind, now);
                true
            }
        }
    }
}

pub fn meaningful_timeout(policies: &[DefensePolicy]) -> Option<Duration> {
    policies.iter().find_map(|p| match p {
        DefensePolicy::MeaningfulPacketTimeout {
            max_awake_without_meaningful,
        } => Some(*max_awake_without_meaningful),
        _ => None,
    })
}

pub fn spoof_action(policies: &[DefensePolicy]) -> Option<SpoofAction> {
    policies.iter().find_map(|p| match p {
        DefensePolicy::SpoofDetection { action } => Some(*action),
        _ => None,
    })
}

/// Instant at which an awake device must be forced back to sleep.
pub fn meaningful_deadline(
    awake_since: SimTime,
    last_meaningful: Option<SimTime>,
    limit: Duration,
) -> SimTime {
    awake_since.max(last_meaningful.unwrap_or(SimTime::ZERO)) + limit
}

/// True when the device has been awake longer than `limit` without a meaningful frame.
pub fn apply_meaningful_timeout(
    awake_since: SimTime,
    last_meaningful: Option<SimTime>,
    limit: Duration,
    now: SimTime,
) -> bool {
    now >= meaningful_deadline(awake_since, last_meaningful, limit)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SpoofVerdict {
    pub spoofed: bool,
    pub alert: Option<SecurityAlert>,
    pub distrust_until: Option<SimTime>,
}

/// Checks whether `frame` claims to come from `own_id` on our own network.
pub fn apply_spoof_detection(
    own_id: u8,
    home_id: u32,
    frame: &MacFrame,
    now: SimTime,
    action: Option<SpoofAction>,
    gate: &mut AlertGate,
) -> SpoofVerdict {
    if frame.source_id != own_id || frame.home_id != home_id {
        return SpoofVerdict::default();
    }
    let Some(action) = action else {
        return SpoofVerdict {
            spoofed: true,
            ..SpoofVerdict::default()
        };
    };
    let alert = gate
        .admit(AlertKind::SpoofedSourceId, now)
        .then(|| SecurityAlert {
            time: now,
            node: own_id,
            cause: AlertCause::SpoofedSourceId {
                frame_summary: format!(
                    "{} {:02x}->{:02x}",
                    frame.kind.name(),
                    frame.source_id,
                    frame.dest_id
                ),
            },
        });
    let distrust_until = match action {
        SpoofAction::AlertUser => None,
        SpoofAction::SuspiciousState { distrust_duration } => Some(now + distrust_duration),
    };
    SpoofVerdict {
        spoofed: true,
        alert,
        distrust_until,
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn admitted_alerts_are_a_cooldown_apart(mut times in proptest::collection::vec(0u64..600_000_000, 1..100)) {
            times.sort_unstable();
            let mut gate = AlertGate::default();
            let mut last: Option<u64> = None;
            for t in times {
                if gate.admit(AlertKind::SpoofedSourceId, SimTime(t)) {
                    if let Some(l) = last {
                        prop_assert!(t - l >= 60_000_000);
                    }
                    last = Some(t);
                } else {
                    prop_assert!(last.is_some_and(|l| t - l < 60_000_000));
                }
            }
        }
    }
}
