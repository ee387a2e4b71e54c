//! The attacker node: passive sniffing, scheduled floods and the weakest-link
//! battery estimator.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::codec::{home_id_hash, BeamFrame, Frame, FrameKind, MacFrame, BROADCAST_ID};
use crate::device::CONTROLLER_ID;
use crate::sim::{Position, SimTime};

pub const DEFAULT_INITIAL_BEAM: Duration = Duration::from_millis(1160);
pub const DEFAULT_KEEPALIVE_BEAM: Duration = Duration::from_millis(10);
pub const RETRY_PERIOD: Duration = Duration::from_secs(10);
pub const MONITOR_PERIOD: Duration = Duration::from_secs(1);
pub const RESPONSE_WINDOW: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NodeRole {
    Controller,
    Device,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeSighting {
    pub role: NodeRole,
    pub last_seen: SimTime,
}

/// What the attacker has learned from frames it actually received.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SniffedKnowledge {
    networks: BTreeMap<u32, BTreeMap<u8, NodeSighting>>,
    /// Home ids in the order they were first heard.
    order: Vec<u32>,
}

impl SniffedKnowledge {
    pub fn is_empty(&self) -> bool {
        self.networks.is_empty()
    }

    pub fn home_ids(&self) -> &[u32] {
        &self.order
    }

    pub fn nodes(&self, home_id: u32) -> impl Iterator<Item = (u8, &NodeSighting)> {
        self.networks
            .get(&home_id)
            .into_iter()
            .flat_map(|m| m.iter().map(|(id, s)| (*id, s)))
    }

    pub fn knows(&self, home_id: u32, node: u8) -> bool {
        self.networks
            .get(&home_id)
            .is_some_and(|m| m.contains_key(&node))
    }

    pub fn controller(&self, home_id: u32) -> Option<u8> {
        self.nodes(home_id)
            .find(|(_, s)| s.role == NodeRole::Controller)
            .map(|(id, _)| id)
    }

    /// First-heard network containing `node`.
    pub fn home_of(&self, node: u8) -> Option<u32> {
        self.order.iter().copied().find(|&h| self.knows(h, node))
    }

    pub fn sniff(&mut self, frame: &Frame, now: SimTime) {
        let Frame::Mac(f) = frame else {
            return;
        };
        if !self.networks.contains_key(&f.home_id) {
            self.order.push(f.home_id);
        }
        let net = self.networks.entry(f.home_id).or_default();
        for id in [f.source_id, f.dest_id] {
            if id == BROADCAST_ID {
                continue;
            }
            let role = if id == CONTROLLER_ID {
                NodeRole::Controller
            } else {
                NodeRole::Device
            };
            net.insert(
                id,
                NodeSighting {
                    role,
                    last_seen: now,
                },
            );
        }
    }

    /// Every identifier in an outgoing frame must have been observed.
    /// `allowed_home` whitelists a deliberately forged home id.
    pub fn check_honest(&self, frame: &Frame, allowed_home: Option<u32>) -> Result<(), String> {
        match frame {
            Frame::Mac(f) => {
                let forged = allowed_home == Some(f.home_id);
                if !forged && !self.networks.contains_key(&f.home_id) {
                    return Err(format!("home id {:08x} was never observed", f.home_id));
                }
                let homes: Vec<u32> = if forged {
                    self.order.clone()
                } else {
                    vec![f.home_id]
                };
                for id in [f.source_id, f.dest_id] {
                    if !homes.iter().any(|&h| self.knows(h, id)) {
                        return Err(format!("node {id:02x} was never observed"));
                    }
                }
                Ok(())
            }
            Frame::Beam(b) => {
                let ok = self
                    .order
                    .iter()
                    .any(|&h| home_id_hash(h) == b.home_id_hash && self.knows(h, b.node_id));
                if ok {
                    Ok(())
                } else {
                    Err(format!("beam to {:02x} uses unobserved identifiers", b.node_id))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttackStrategy {
    DrainFlirs {
        target: u8,
        pps: u32,
        initial_beam: Duration,
        keepalive_beam: Duration,
    },
    DrainWakeupInterval {
        target: u8,
        pps: u32,
    },
    DosController {
        pps: u32,
        /// Forge this home id instead of the sniffed one.
        foreign_home_id: Option<u32>,
        /// Impersonated device; the lowest sniffed device id when unset.
        spoof_source: Option<u8>,
    },
    DosMotionSensor {
        target: u8,
        msg_rate: u32,
        initial_beam: Duration,
        keepalive_beam: Duration,
        /// One keepalive beam per this many messages.
        keepalive_every: u32,
    },
    WeakestLinkProbe {
        targets: Vec<u8>,
        pps: u32,
        drop_fraction: f64,
        /// Beam before the flood, for FLiRS targets.
        beams: Option<(Duration, Duration)>,
    },
}

impl AttackStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            AttackStrategy::DrainFlirs { .. } => "drain_flirs",
            AttackStrategy::DrainWakeupInterval { .. } => "drain_wakeup",
            AttackStrategy::DosController { .. } => "dos_controller",
            AttackStrategy::DosMotionSensor { .. } => "dos_motion",
            AttackStrategy::WeakestLinkProbe { .. } => "probe",
        }
    }

    pub fn targets(&self) -> Vec<u8> {
        match self {
            AttackStrategy::DrainFlirs { target, .. }
            | AttackStrategy::DrainWakeupInterval { target, .. }
            | AttackStrategy::DosMotionSensor { target, .. } => vec![*target],
            AttackStrategy::DosController { .. } => vec![CONTROLLER_ID],
            AttackStrategy::WeakestLinkProbe { targets, .. } => targets.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let rate = match self {
            AttackStrategy::DrainFlirs { pps, .. }
            | AttackStrategy::DrainWakeupInterval { pps, .. }
            | AttackStrategy::DosController { pps, .. }
            | AttackStrategy::WeakestLinkProbe { pps, .. } => *pps,
            AttackStrategy::DosMotionSensor {
                msg_rate,
                keepalive_every,
                ..
            } => {
                if *keepalive_every == 0 {
                    return Err(AttackError::InvalidParameter("keepalive_every must be positive"));
                }
                *msg_rate
            }
        };
        if rate == 0 {
            return Err(AttackError::InvalidParameter("rate must be positive"));
        }
        if let AttackStrategy::WeakestLinkProbe {
            targets,
            drop_fraction,
            ..
        } = self
        {
            if targets.is_empty() {
                return Err(AttackError::NoTargets);
            }
            if !(*drop_fraction > 0.0 && *drop_fraction < 1.0) {
                return Err(AttackError::InvalidParameter("drop_fraction must be in (0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttackError {
    #[error("target {0:#04x} has not been observed")]
    UnknownTarget(u8),
    #[error("probe needs at least one target")]
    NoTargets,
    #[error("invalid attack parameter: {0}")]
    InvalidParameter(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackerConfig {
    pub position: Position,
    pub range_m: f64,
    pub start: SimTime,
    pub stop: Option<SimTime>,
    pub strategy: AttackStrategy,
    /// Bind to this sniffed network instead of the first one heard.
    pub home_id: Option<u32>,
    /// End the run once every probe target has an estimate.
    pub stop_when_ranked: bool,
}

impl AttackerConfig {
    pub fn new(strategy: AttackStrategy) -> Self {
        AttackerConfig {
            position: Position::new(40.0, 0.0),
            range_m: 150.0,
            start: SimTime::from_secs(10),
            stop: None,
            strategy,
            home_id: None,
            stop_when_ranked: false,
        }
    }
}

/// Ramping detector for one probe target. The first full minute after the
/// first response sets the baseline; a later minute below
/// `drop_fraction × baseline` followed by any response marks ramping.
#[derive(Debug, Clone)]
pub struct RampDetector {
    pub target: u8,
    drop_fraction: f64,
    nominal_per_min: f64,
    first_response: Option<SimTime>,
    window: VecDeque<SimTime>,
    baseline: Option<usize>,
    drop_at: Option<SimTime>,
    result: Option<Duration>,
}

impl RampDetector {
    pub fn new(target: u8, pps: u32, drop_fraction: f64) -> Self {
        RampDetector {
            target,
            drop_fraction,
            nominal_per_min: f64::from(pps) * RESPONSE_WINDOW.as_secs_f64(),
            first_response: None,
            window: VecDeque::new(),
            baseline: None,
            drop_at: None,
            result: None,
        }
    }

    pub fn on_response(&mut self, t: SimTime) {
        self.first_response.get_or_insert(t);
        self.window.push_back(t);
        if let (Some(drop), None) = (self.drop_at, self.result) {
            if t > drop {
                self.result = Some(drop - self.first_response.unwrap_or(drop));
            }
        }
    }

    pub fn rate(&mut self, now: SimTime) -> usize {
        while let Some(&front) = self.window.front() {
            if now.since(front) >= RESPONSE_WINDOW {
                self.window.pop_front();
            } else {
                break;
            }
        }
        self.window.len()
    }

    pub fn on_tick(&mut self, now: SimTime) {
        let rate = self.rate(now);
        let Some(first) = self.first_response else {
            return;
        };
        if self.result.is_some() {
            return;
        }
        match self.baseline {
            None if now.since(first) >= RESPONSE_WINDOW => {
                self.baseline = Some(rate);
                if (rate as f64) < self.drop_fraction * self.nominal_per_min {
                    self.result = Some(Duration::ZERO);
                }
            }
            Some(base) if self.drop_at.is_none() && (rate as f64) < self.drop_fraction * base as f64 => {
                self.drop_at = Some(now);
            }
            _ => {}
        }
    }

    /// Closes the estimate at the end of a run. A target that never answered
    /// is treated as already exhausted.
    pub fn finish(&mut self) {
        if self.first_response.is_none() {
            self.result = Some(Duration::ZERO);
        }
    }

    pub fn is_done(&self) -> bool {
        self.result.is_some()
    }

    pub fn estimate(&self, distance_m: f64) -> BatteryEstimate {
        BatteryEstimate {
            target: self.target,
            time_to_ramping: self.result,
            initial_rate_per_min: self.baseline,
            first_response: self.first_response,
            distance_m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatteryEstimate {
    pub target: u8,
    /// None until ramping has been observed.
    pub time_to_ramping: Option<Duration>,
    pub initial_rate_per_min: Option<usize>,
    pub first_response: Option<SimTime>,
    pub distance_m: f64,
}

/// Weakest first: ascending time to ramping, unobserved last.
pub fn rank(mut estimates: Vec<BatteryEstimate>) -> Vec<BatteryEstimate> {
    estimates.sort_by_key(|e| (e.time_to_ramping.is_none(), e.time_to_ramping, e.target));
    estimates
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackerTimer {
    Start,
    /// Beam slot of stream message `n`.
    Slot { stream: usize, n: u64 },
    /// Message `n` of a stream.
    Send { stream: usize, n: u64 },
    Monitor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttackerOutput {
    Transmit { frame: Frame, train: Option<Duration> },
    Timer { at: SimTime, timer: AttackerTimer },
    Log { kind: &'static str, detail: String },
}

#[derive(Debug, Clone)]
struct Stream {
    home: u32,
    src: u8,
    dst: u8,
    kinds: Vec<FrameKind>,
    rate: u32,
    base: SimTime,
    keepalive: Option<(Duration, u32)>,
}

impl Stream {
    fn slot(&self, n: u64) -> SimTime {
        SimTime(self.base.0 + n * 1_000_000 / u64::from(self.rate))
    }

    fn message_offset(&self) -> Duration {
        self.keepalive.map_or(Duration::ZERO, |(d, _)| d)
    }
}

pub struct Attacker {
    pub cfg: AttackerConfig,
    pub knowledge: SniffedKnowledge,
    streams: Vec<Stream>,
    detectors: Vec<RampDetector>,
    forged_home: Option<u32>,
    started: bool,
    pub frames_sent: u64,
    pub responses_seen: u64,
}

impl Attacker {
    pub fn new(cfg: AttackerConfig) -> Self {
        let detectors = match &cfg.strategy {
            AttackStrategy::WeakestLinkProbe {
                targets,
                pps,
                drop_fraction,
                ..
            } => targets
                .iter()
                .map(|&t| RampDetector::new(t, *pps, *drop_fraction))
                .collect(),
            _ => Vec::new(),
        };
        let forged_home = match &cfg.strategy {
            AttackStrategy::DosController {
                foreign_home_id, ..
            } => *foreign_home_id,
            _ => None,
        };
        Attacker {
            cfg,
            knowledge: SniffedKnowledge::default(),
            streams: Vec::new(),
            detectors,
            forged_home,
            started: false,
            frames_sent: 0,
            responses_seen: 0,
        }
    }

    pub fn started(&self) -> bool {
        self.started
    }

    pub fn forged_home(&self) -> Option<u32> {
        self.forged_home
    }

    pub fn detectors(&self) -> &[RampDetector] {
        &self.detectors
    }

    pub fn detectors_mut(&mut self) -> &mut [RampDetector] {
        &mut self.detectors
    }

    pub fn all_ranked(&self) -> bool {
        !self.detectors.is_empty() && self.detectors.iter().all(RampDetector::is_done)
    }

    fn stopped(&self, now: SimTime) -> bool {
        self.cfg.stop.is_some_and(|s| now >= s)
    }

    pub fn on_sniff(&mut self, frame: &Frame, now: SimTime) {
        self.knowledge.sniff(frame, now);
        if let Frame::Mac(MacFrame {
            source_id,
            kind: FrameKind::NonceReport(_),
            home_id,
            ..
        }) = frame
        {
            let bound = self.streams.first().map(|s| s.home);
            if bound == Some(*home_id) {
                for d in self.detectors.iter_mut().filter(|d| d.target == *source_id) {
                    d.on_response(now);
                    self.responses_seen += 1;
                }
            }
        }
    }

    fn bind_home(&self, anchor: u8) -> Result<u32, AttackError> {
        match self.cfg.home_id {
            Some(h) if self.knowledge.knows(h, anchor) => Ok(h),
            Some(_) => Err(AttackError::UnknownTarget(anchor)),
            None => self
                .knowledge
                .home_of(anchor)
                .ok_or(AttackError::UnknownTarget(anchor)),
        }
    }

    fn plan(&self, now: SimTime) -> Result<(Vec<Stream>, Vec<(u8, u32, Duration)>), AttackError> {
        self.cfg.strategy.validate()?;
        let mut streams = Vec::new();
        let mut beams = Vec::new();
        let flood = |home: u32, dst: u8, kinds: Vec<FrameKind>, rate: u32, base: SimTime, keepalive| Stream {
            home,
            src: CONTROLLER_ID,
            dst,
            kinds,
            rate,
            base,
            keepalive,
        };
        match &self.cfg.strategy {
            AttackStrategy::DrainFlirs {
                target,
                pps,
                initial_beam,
                keepalive_beam,
            } => {
                let home = self.bind_home(*target)?;
                beams.push((*target, home, *initial_beam));
                let keep = (!keepalive_beam.is_zero()).then_some((*keepalive_beam, 1));
                streams.push(flood(home, *target, vec![FrameKind::NonceGet], *pps, now + *initial_beam, keep));
            }
            AttackStrategy::DrainWakeupInterval { target, pps } => {
                let home = self.bind_home(*target)?;
                streams.push(flood(home, *target, vec![FrameKind::NonceGet], *pps, now, None));
            }
            AttackStrategy::DosController {
                pps,
                foreign_home_id,
                spoof_source,
            } => {
                let home = self.bind_home(CONTROLLER_ID)?;
                if self.knowledge.controller(home).is_none() {
                    return Err(AttackError::UnknownTarget(CONTROLLER_ID));
                }
                let src = match spoof_source {
                    Some(s) if self.knowledge.knows(home, *s) => *s,
                    Some(s) => return Err(AttackError::UnknownTarget(*s)),
                    None => self
                        .knowledge
                        .nodes(home)
                        .find(|(_, s)| s.role == NodeRole::Device)
                        .map(|(id, _)| id)
                        .ok_or(AttackError::UnknownTarget(CONTROLLER_ID))?,
                };
                streams.push(Stream {
                    home: foreign_home_id.unwrap_or(home),
                    src,
                    dst: CONTROLLER_ID,
                    kinds: vec![FrameKind::NonceGet],
                    rate: *pps,
                    base: now,
                    keepalive: None,
                });
            }
            AttackStrategy::DosMotionSensor {
                target,
                msg_rate,
                initial_beam,
                keepalive_beam,
                keepalive_every,
            } => {
                let home = self.bind_home(*target)?;
                beams.push((*target, home, *initial_beam));
                let keep = (!keepalive_beam.is_zero()).then_some((*keepalive_beam, *keepalive_every));
                streams.push(flood(
                    home,
                    *target,
                    vec![FrameKind::ConfigurationGet, FrameKind::NonceGet],
                    *msg_rate,
                    now + *initial_beam,
                    keep,
                ));
            }
            AttackStrategy::WeakestLinkProbe {
                targets, pps, beams: beam_plan, ..
            } => {
                let home = self.bind_home(targets[0])?;
                for &t in targets {
                    if !self.knowledge.knows(home, t) {
                        return Err(AttackError::UnknownTarget(t));
                    }
                    let (base, keep) = match beam_plan {
                        Some((initial, keepalive)) => {
                            beams.push((t, home, *initial));
                            (now + *initial, (!keepalive.is_zero()).then_some((*keepalive, 1)))
                        }
                        None => (now, None),
                    };
                    streams.push(flood(home, t, vec![FrameKind::NonceGet], *pps, base, keep));
                }
            }
        }
        Ok((streams, beams))
    }

    pub fn on_timer(&mut self, now: SimTime, timer: AttackerTimer) -> Vec<AttackerOutput> {
        let mut out = Vec::new();
        match timer {
            AttackerTimer::Start => self.try_start(now, &mut out),
            AttackerTimer::Slot { stream, n } => {
                if self.stopped(now) {
                    return out;
                }
                let s = &self.streams[stream];
                if let Some((dur, every)) = s.keepalive {
                    if n % u64::from(every) == 0 {
                        out.push(AttackerOutput::Transmit {
                            frame: Frame::Beam(BeamFrame::wake(s.dst, s.home, crate::codec::BEAM_SHORT_LEN)),
                            train: Some(dur),
                        });
                        self.frames_sent += 1;
                    }
                }
                out.push(AttackerOutput::Timer {
                    at: now + s.message_offset(),
                    timer: AttackerTimer::Send { stream, n },
                });
            }
            AttackerTimer::Send { stream, n } => {
                if self.stopped(now) {
                    return out;
                }
                let s = &self.streams[stream];
                let kind = s.kinds[(n % s.kinds.len() as u64) as usize].clone();
                out.push(AttackerOutput::Transmit {
                    frame: Frame::Mac(MacFrame::new(s.home, s.src, s.dst, kind)),
                    train: None,
                });
                self.frames_sent += 1;
                let next = n + 1;
                let at = s.slot(next);
                let timer = if s.keepalive.is_some() {
                    AttackerTimer::Slot { stream, n: next }
                } else {
                    AttackerTimer::Send { stream, n: next }
                };
                out.push(AttackerOutput::Timer { at, timer });
            }
            AttackerTimer::Monitor => {
                for d in &mut self.detectors {
                    let was = d.is_done();
                    d.on_tick(now);
                    if !was && d.is_done() {
                        out.push(AttackerOutput::Log {
                            kind: "ramping_detected",
                            detail: format!(
                                "target={:02x} after_us={}",
                                d.target,
                                d.result.unwrap_or_default().as_micros()
                            ),
                        });
                    }
                }
                if !self.stopped(now) {
                    out.push(AttackerOutput::Timer {
                        at: now + MONITOR_PERIOD,
                        timer: AttackerTimer::Monitor,
                    });
                }
            }
        }
        out
    }

    fn try_start(&mut self, now: SimTime, out: &mut Vec<AttackerOutput>) {
        if self.started || self.stopped(now) {
            return;
        }
        match self.plan(now) {
            Ok((streams, beams)) => {
                self.started = true;
                out.push(AttackerOutput::Log {
                    kind: "attack_start",
                    detail: self.cfg.strategy.name().to_string(),
                });
                for (node, home, dur) in beams {
                    if !dur.is_zero() {
                        out.push(AttackerOutput::Transmit {
                            frame: Frame::Beam(BeamFrame::wake(node, home, crate::codec::BEAM_LONG_LEN)),
                            train: Some(dur),
                        });
                        self.frames_sent += 1;
                    }
                }
                for (i, s) in streams.iter().enumerate() {
                    let timer = if s.keepalive.is_some() {
                        AttackerTimer::Slot { stream: i, n: 0 }
                    } else {
                        AttackerTimer::Send { stream: i, n: 0 }
                    };
                    out.push(AttackerOutput::Timer { at: s.base, timer });
                }
                self.streams = streams;
                if !self.detectors.is_empty() {
                    out.push(AttackerOutput::Timer {
                        at: now + MONITOR_PERIOD,
                        timer: AttackerTimer::Monitor,
                    });
                }
            }
            Err(e @ (AttackError::NoTargets | AttackError::InvalidParameter(_))) => {
                out.push(AttackerOutput::Log {
                    kind: "attack_refused",
                    detail: e.to_string(),
                });
            }
            Err(e) => {
                out.push(AttackerOutput::Log {
                    kind: "attack_refused",
                    detail: e.to_string(),
                });
                out.push(AttackerOutput::Timer {
                    at: now + RETRY_PERIOD,
                    timer: AttackerTimer::Start,
                });
            }
        }
    }

    pub fn finish(&mut self) {
        if self.started {
            for d in &mut self.detectors {
                d.finish();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HOME: u32 = 0xC0FF_EE01;

    fn mac(src: u8, dst: u8, kind: FrameKind) -> Frame {
        Frame::Mac(MacFrame::new(HOME, src, dst, kind))
    }

    fn sent(out: &[AttackerOutput]) -> Vec<Frame> {
        out.iter()
            .filter_map(|o| match o {
                AttackerOutput::Transmit { frame, .. } => Some(frame.clone()),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn sniffing_learns_home_nodes_and_controller() {
        let mut k = SniffedKnowledge::default();
        k.sniff(&mac(0x05, 0x01, FrameKind::NonceReport([0; 8])), SimTime(5));
        assert_eq!(k.home_ids(), &[HOME]);
        assert!(k.knows(HOME, 0x05));
        assert_eq!(k.controller(HOME), Some(0x01));
    }

    #[test]
    fn two_networks_bind_to_first_heard() {
        let mut k = SniffedKnowledge::default();
        k.sniff(&Frame::Mac(MacFrame::new(0xAAAA_0001, 0x05, 0x01, FrameKind::Ack)), SimTime(1));
        k.sniff(&mac(0x05, 0x01, FrameKind::Ack), SimTime(2));
        assert_eq!(k.home_ids(), &[0xAAAA_0001, HOME]);
        assert_eq!(k.home_of(0x05), Some(0xAAAA_0001));
    }

    #[test]
    fn refuses_without_knowledge_and_retries() {
        let mut a = Attacker::new(AttackerConfig::new(AttackStrategy::DrainWakeupInterval {
            target: 0x05,
            pps: 10,
        }));
        let out = a.on_timer(SimTime::from_secs(10), AttackerTimer::Start);
        assert!(sent(&out).is_empty());
        assert!(out.contains(&AttackerOutput::Timer {
            at: SimTime::from_secs(20),
            timer: AttackerTimer::Start
        }));
        assert!(!a.started());
    }

    #[test]
    fn drain_emits_spoofed_nonce_gets_on_exact_period() {
        let mut a = Attacker::new(AttackerConfig::new(AttackStrategy::DrainWakeupInterval {
            target: 0x05,
            pps: 3,
        }));
        a.on_sniff(&mac(0x05, 0x01, FrameKind::WakeupNotification), SimTime(1));
        let out = a.on_timer(SimTime::from_secs(10), AttackerTimer::Start);
        assert!(a.started());
        let mut at = SimTime::from_secs(10);
        let mut n = 0;
        let mut times = Vec::new();
        for _ in 0..4 {
            let out = a.on_timer(at, AttackerTimer::Send { stream: 0, n });
            let f = sent(&out);
            assert_eq!(f.len(), 1);
            let Frame::Mac(m) = &f[0] else { panic!() };
            assert_eq!((m.source_id, m.dest_id, m.home_id), (0x01, 0x05, HOME));
            assert!(a.knowledge.check_honest(&f[0], None).is_ok());
            times.push(at.0);
            match out.last() {
                Some(AttackerOutput::Timer { at: t, timer: AttackerTimer::Send { n: k, .. } }) => {
                    at = *t;
                    n = *k;
                }
                other => panic!("{other:?}"),
            }
        }
        assert_eq!(times, [10_000_000, 10_333_333, 10_666_666, 11_000_000]);
        drop(out);
    }

    #[test]
    fn flirs_drain_starts_with_long_beam() {
        let mut a = Attacker::new(AttackerConfig::new(AttackStrategy::DrainFlirs {
            target: 0x06,
            pps: 10,
            initial_beam: DEFAULT_INITIAL_BEAM,
            keepalive_beam: DEFAULT_KEEPALIVE_BEAM,
        }));
        a.on_sniff(&mac(0x06, 0x01, FrameKind::WakeupNotification), SimTime(1));
        let out = a.on_timer(SimTime::from_secs(10), AttackerTimer::Start);
        let trains: Vec<_> = out
            .iter()
            .filter_map(|o| match o {
                AttackerOutput::Transmit { train: Some(d), frame: Frame::Beam(b) } => Some((*d, b.node_id)),
                _ => None,
            })
            .collect();
        assert_eq!(trains, vec![(Duration::from_millis(1160), 0x06)]);
        assert!(out.contains(&AttackerOutput::Timer {
            at: SimTime::from_millis(11_160),
            timer: AttackerTimer::Slot { stream: 0, n: 0 }
        }));
    }

    #[test]
    fn honesty_rejects_unseen_ids() {
        let mut k = SniffedKnowledge::default();
        k.sniff(&mac(0x05, 0x01, FrameKind::Ack), SimTime(1));
        assert!(k.check_honest(&mac(0x01, 0x09, FrameKind::NonceGet), None).is_err());
        let forged = Frame::Mac(MacFrame::new(0xDEAD_BEEF, 0x05, 0x01, FrameKind::NonceGet));
        assert!(k.check_honest(&forged, None).is_err());
        assert!(k.check_honest(&forged, Some(0xDEAD_BEEF)).is_ok());
        let beam = Frame::Beam(BeamFrame::wake(0x05, HOME, 8));
        assert!(k.check_honest(&beam, None).is_ok());
    }

    fn detector_with(rates: &[usize]) -> RampDetector {
        // one entry per minute, responses spread evenly, ticks every second
        let mut times = Vec::new();
        for (minute, &r) in rates.iter().enumerate() {
            for i in 0..r as u64 {
                times.push(minute as u64 * 60_000_000 + i * 60_000_000 / r as u64 + 1);
            }
        }
        let mut d = RampDetector::new(0x05, 10, 0.5);
        let mut next = times.iter().peekable();
        for s in 1..=rates.len() as u64 * 60 {
            while let Some(&&t) = next.peek() {
                if t > s * 1_000_000 {
                    break;
                }
                d.on_response(SimTime(t));
                next.next();
            }
            d.on_tick(SimTime::from_secs(s));
        }
        d
    }

    #[test]
    fn fresh_rate_then_drop_and_recovery_detects_ramping() {
        let d = detector_with(&[600, 600, 600, 200, 400]);
        let e = d.estimate(40.0);
        assert_eq!(e.initial_rate_per_min, Some(600));
        let t = e.time_to_ramping.expect("ramping");
        assert!(t > Duration::from_secs(150) && t < Duration::from_secs(240), "{t:?}");
    }

    #[test]
    fn drop_without_recovery_is_not_ramping() {
        let d = detector_with(&[600, 600, 0, 0]);
        assert_eq!(d.estimate(0.0).time_to_ramping, None);
    }

    #[test]
    fn weak_baseline_or_silence_ranks_zero() {
        let d = detector_with(&[200, 200]);
        assert_eq!(d.estimate(0.0).time_to_ramping, Some(Duration::ZERO));
        let mut silent = RampDetector::new(0x07, 10, 0.5);
        silent.on_tick(SimTime::from_secs(3600));
        assert!(!silent.is_done());
        silent.finish();
        assert_eq!(silent.estimate(0.0).time_to_ramping, Some(Duration::ZERO));
    }

    #[test]
    fn ranking_puts_earliest_first_and_unknown_last() {
        let e = |target, t: Option<u64>| BatteryEstimate {
            target,
            time_to_ramping: t.map(Duration::from_secs),
            initial_rate_per_min: None,
            first_response: None,
            distance_m: 0.0,
        };
        let r = rank(vec![e(1, None), e(2, Some(900)), e(3, Some(0)), e(4, Some(30))]);
        let order: Vec<u8> = r.iter().map(|e| e.target).collect();
        assert_eq!(order, [3, 4, 2, 1]);
    }

    #[test]
    fn probe_without_targets_is_rejected() {
        let s = AttackStrategy::WeakestLinkProbe {
            targets: vec![],
            pps: 10,
            drop_fraction: 0.5,
            beams: None,
        };
        assert_eq!(s.validate(), Err(AttackError::NoTargets));
    }
}
