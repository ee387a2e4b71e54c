//! Battery-powered sensors and the mains-powered controller.
//!
//! Handlers never touch the event queue or the channel directly. They push
//! [`Output`]s (frames to send, timers to arm, log records) into a [`Ctx`]
//! and the engine applies them.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Duration;

use rand::RngCore;
use serde::Serialize;

use crate::battery::{SupplyState, SupplyTransition};
use crate::codec::{BeamFrame, Frame, FrameKind, MacFrame, BROADCAST_ID, NONCE_LEN};
use crate::defense::{
    self, AlertCause, AlertGate, AlertKind, DefensePolicy, SecurityAlert,
};
use crate::sim::{Position, SimTime};
use crate::{Battery, BatteryParameters, SupplyMonitor};

pub const CONTROLLER_ID: u8 = 0x01;

/// First payload byte of an encrypted sensor report.
pub const REPORT_MARKER: u8 = 0x01;
/// First payload byte of an encrypted security alert.
pub const ALERT_MARKER: u8 = 0xA1;

pub const BATTERY_TICK: Duration = Duration::from_millis(100);
pub const DEAD_BATTERY_TICK: Duration = Duration::from_secs(10);
/// A shutdown lasting this long counts as battery death.
pub const DEATH_WINDOW: Duration = Duration::from_secs(300);
const RATE_WINDOW: Duration = Duration::from_secs(1);
const RESPONSE_WINDOW: Duration = Duration::from_secs(60);
const DOS_CHECK_PERIOD: Duration = Duration::from_millis(250);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PowerState {
    DeepSleep,
    LightSleep,
    Awake,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceClass {
    Flirs {
        light_sleep_period: Duration,
        light_sleep_window: Duration,
    },
    WakeupInterval {
        wakeup_interval: Duration,
        heartbeat_interval: Duration,
    },
    ManualWakeup,
    MainsController {
        dos_threshold_pps: u32,
    },
}

impl DeviceClass {
    pub fn name(&self) -> &'static str {
        match self {
            DeviceClass::Flirs { .. } => "flirs",
            DeviceClass::WakeupInterval { .. } => "wakeup_interval",
            DeviceClass::ManualWakeup => "manual",
            DeviceClass::MainsController { .. } => "mains",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Contact,
    Motion,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Contact => "contact",
            Profile::Motion => "motion",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceConfig {
    pub node_id: u8,
    pub home_id: u32,
    pub profile: Profile,
    pub class: DeviceClass,
    pub position: Position,
    pub range_m: f64,
    pub soc: f64,
    pub capacity_mah: f64,
    pub sleep_power_mw: f64,
    pub awake_power_mw: f64,
    /// Scales awake draw, e.g. for weak-signal reception. 1.0 by default.
    pub rx_power_multiplier: f64,
    pub awake_idle_timeout: Duration,
    pub heartbeat_window: Duration,
    pub wakeup_window: Duration,
    /// Offset of the first heartbeat; defaults to one full interval.
    pub heartbeat_phase: Option<Duration>,
    /// Offset of the first light-sleep window; drawn from the seed when unset.
    pub light_sleep_phase: Option<Duration>,
    /// Requests per second at which sensing stops.
    pub overload_threshold: u32,
    pub defenses: Vec<DefensePolicy>,
}

impl DeviceConfig {
    /// Door/window contact sensor: wakeup-interval class on two coin cells.
    pub fn contact(node_id: u8, home_id: u32) -> Self {
        DeviceConfig {
            node_id,
            home_id,
            profile: Profile::Contact,
            class: DeviceClass::WakeupInterval {
                wakeup_interval: Duration::from_secs(12 * 3600),
                heartbeat_interval: Duration::from_secs(71 * 60),
            },
            position: Position::new(0.0, 0.0),
            range_m: 40.0,
            soc: 1.0,
            capacity_mah: 470.0,
            sleep_power_mw: 0.02,
            awake_power_mw: 35.0,
            rx_power_multiplier: 1.0,
            awake_idle_timeout: Duration::from_millis(350),
            heartbeat_window: Duration::from_secs(2),
            wakeup_window: Duration::from_secs(1),
            heartbeat_phase: None,
            light_sleep_phase: None,
            overload_threshold: 80,
            defenses: Vec::new(),
        }
    }

    /// Motion sensor: FLiRS class on AA cells.
    pub fn motion(node_id: u8, home_id: u32) -> Self {
        DeviceConfig {
            profile: Profile::Motion,
            class: DeviceClass::Flirs {
                light_sleep_period: Duration::from_secs(1),
                light_sleep_window: Duration::from_millis(10),
            },
            capacity_mah: 2400.0,
            sleep_power_mw: 0.65,
            awake_power_mw: 33.5,
            ..DeviceConfig::contact(node_id, home_id)
        }
    }

    pub fn for_profile(profile: Profile, node_id: u8, home_id: u32) -> Self {
        match profile {
            Profile::Contact => Self::contact(node_id, home_id),
            Profile::Motion => Self::motion(node_id, home_id),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeTimer {
    Boot,
    Heartbeat,
    Wakeup,
    IdleCheck,
    MeaningfulCheck,
    BatteryTick,
    DosCheck,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    Transmit(Frame),
    Timer { at: SimTime, timer: NodeTimer },
    Log { kind: &'static str, detail: String },
    Alert(SecurityAlert),
}

/// Handler context: the current time, the run's random source and an output buffer.
pub struct Ctx<'a> {
    pub now: SimTime,
    pub rng: &'a mut dyn RngCore,
    pub out: Vec<Output>,
}

impl<'a> Ctx<'a> {
    pub fn new(now: SimTime, rng: &'a mut dyn RngCore) -> Self {
        Ctx {
            now,
            rng,
            out: Vec::new(),
        }
    }

    fn log(&mut self, kind: &'static str, detail: String) {
        self.out.push(Output::Log { kind, detail });
    }

    fn timer(&mut self, at: SimTime, timer: NodeTimer) {
        self.out.push(Output::Timer { at, timer });
    }

    fn send(&mut self, frame: MacFrame) {
        self.out.push(Output::Transmit(Frame::Mac(frame)));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StimulusKind {
    DoorOpen,
    Motion,
    /// Controller sends an encrypted command to the target right away.
    Command,
    /// Controller queues an encrypted command until the target's next wakeup notification.
    Queue,
}

impl StimulusKind {
    pub fn name(self) -> &'static str {
        match self {
            StimulusKind::DoorOpen => "door_open",
            StimulusKind::Motion => "motion",
            StimulusKind::Command => "command",
            StimulusKind::Queue => "queue",
        }
    }

    pub fn is_sensed(self) -> bool {
        matches!(self, StimulusKind::DoorOpen | StimulusKind::Motion)
    }

    fn code(self) -> u8 {
        match self {
            StimulusKind::DoorOpen => 0x10,
            StimulusKind::Motion => 0x20,
            StimulusKind::Command => 0x30,
            StimulusKind::Queue => 0x31,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SuppressReason {
    BelowCutoff,
    Overloaded,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SenseOutcome {
    Report(MacFrame),
    Suppressed(SuppressReason),
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct DeviceStats {
    pub responses: u64,
    pub reports: u64,
    pub suppressed: u64,
    pub shutdowns: u64,
    pub reboots: u64,
    pub first_shutdown: Option<SimTime>,
    pub death: Option<SimTime>,
    pub first_response: Option<SimTime>,
    pub awake_episodes: u64,
    pub max_awake_episode: Duration,
    pub forced_sleeps: u64,
    pub alerts_raised: u64,
    /// Supply cut-outs and recoveries with the voltage that triggered them.
    pub supply_events: Vec<SupplyEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SupplyEvent {
    pub time: SimTime,
    pub transition: SupplyTransition,
    pub voltage_v: f64,
}

/// Sliding count of instants in the last `window`, right-closed: an event
/// exactly `window` old has left.
#[derive(Debug, Clone, Default)]
pub struct RateWindow {
    window: Duration,
    times: VecDeque<SimTime>,
}

impl RateWindow {
    pub fn new(window: Duration) -> Self {
        RateWindow {
            window,
            times: VecDeque::new(),
        }
    }

    pub fn push(&mut self, t: SimTime) -> usize {
        self.times.push_back(t);
        self.count(t)
    }

    pub fn count(&mut self, now: SimTime) -> usize {
        while let Some(&front) = self.times.front() {
            if now.since(front) >= self.window {
                self.times.pop_front();
            } else {
                break;
            }
        }
        self.times.len()
    }
}

pub struct SensorDevice {
    pub cfg: DeviceConfig,
    battery: Battery,
    supply: SupplyMonitor,
    awake: bool,
    awake_since: SimTime,
    awake_until: SimTime,
    last_activity: SimTime,
    last_meaningful: Option<SimTime>,
    shutdown_since: Option<SimTime>,
    last_sync: SimTime,
    energy_mj: f64,
    light_phase: Duration,
    known: BTreeSet<u8>,
    idle_pending: bool,
    meaningful_pending: bool,
    tick_pending: bool,
    distrust_until: SimTime,
    gate: AlertGate,
    pending_alerts: Vec<AlertKind>,
    responses: RateWindow,
    requests: RateWindow,
    pub stats: DeviceStats,
}

impl SensorDevice {
    pub fn new(cfg: DeviceConfig, light_phase: Duration) -> Self {
        let params = BatteryParameters::coin_cell_pair(cfg.capacity_mah);
        let supply = SupplyMonitor::new(params.cutoff_v, params.recovery_v);
        let battery = Battery::new(params, cfg.soc);
        let light_phase = cfg.light_sleep_phase.unwrap_or(light_phase);
        SensorDevice {
            battery,
            supply,
            awake: false,
            awake_since: SimTime::ZERO,
            awake_until: SimTime::ZERO,
            last_activity: SimTime::ZERO,
            last_meaningful: None,
            shutdown_since: None,
            last_sync: SimTime::ZERO,
            energy_mj: 0.0,
            light_phase,
            known: BTreeSet::from([CONTROLLER_ID]),
            idle_pending: false,
            meaningful_pending: false,
            tick_pending: false,
            distrust_until: SimTime::ZERO,
            gate: AlertGate::default(),
            pending_alerts: Vec::new(),
            responses: RateWindow::new(RESPONSE_WINDOW),
            requests: RateWindow::new(RATE_WINDOW),
            stats: DeviceStats::default(),
            cfg,
        }
    }

    pub fn node_id(&self) -> u8 {
        self.cfg.node_id
    }

    pub fn learn(&mut self, node: u8) {
        self.known.insert(node);
    }

    pub fn battery(&self) -> &Battery {
        &self.battery
    }

    pub fn is_operable(&self) -> bool {
        self.supply.state == SupplyState::Operable
    }

    pub fn supply_state(&self) -> SupplyState {
        self.supply.state
    }

    pub fn is_awake(&self) -> bool {
        self.awake
    }

    pub fn energy_mj(&self) -> f64 {
        self.energy_mj
    }

    pub fn is_flirs(&self) -> bool {
        matches!(self.cfg.class, DeviceClass::Flirs { .. })
    }

    pub fn power_state(&self, now: SimTime) -> PowerState {
        if self.awake {
            PowerState::Awake
        } else if self.in_listen_window(now) {
            PowerState::LightSleep
        } else {
            PowerState::DeepSleep
        }
    }

    /// Instantaneous draw. Light-sleep listening is part of the sleep figure.
    pub fn draw_mw(&self) -> f64 {
        if !self.is_operable() {
            0.0
        } else if self.awake {
            self.cfg.awake_power_mw * self.cfg.rx_power_multiplier
        } else {
            self.cfg.sleep_power_mw
        }
    }

    fn current_ma(&self) -> f64 {
        self.battery.params().current_ma(self.draw_mw())
    }

    fn awake_current_ma(&self) -> f64 {
        self.battery
            .params()
            .current_ma(self.cfg.awake_power_mw * self.cfg.rx_power_multiplier)
    }

    /// Integrates the present draw up to `now`.
    pub fn sync(&mut self, now: SimTime) {
        if now <= self.last_sync {
            return;
        }
        let dt = (now - self.last_sync).as_secs_f64();
        let delivered = self.battery.step(self.current_ma(), dt);
        self.energy_mj += delivered * self.battery.params().nominal_v * 3600.0;
        self.last_sync = now;
    }

    pub fn terminal_voltage(&self) -> f64 {
        self.battery.terminal_voltage(self.current_ma())
    }

    pub fn responses_last_minute(&mut self, now: SimTime) -> usize {
        self.responses.count(now)
    }

    fn in_listen_window(&self, now: SimTime) -> bool {
        let DeviceClass::Flirs {
            light_sleep_period,
            light_sleep_window,
        } = self.cfg.class
        else {
            return false;
        };
        if !self.is_operable() || now.0 < self.light_phase.as_micros() as u64 {
            return false;
        }
        let rel = now.0 - self.light_phase.as_micros() as u64;
        (rel % light_sleep_period.as_micros() as u64) < light_sleep_window.as_micros() as u64
    }

    /// Whether a MAC frame starting now reaches the radio.
    pub fn can_receive_mac(&self) -> bool {
        self.awake && self.is_operable()
    }

    /// When a beam train occupying `[start, end)` is first heard, if at all.
    pub fn beam_catch_time(&self, start: SimTime, end: SimTime) -> Option<SimTime> {
        if !self.is_operable() {
            return None;
        }
        if self.awake {
            return Some(start);
        }
        let DeviceClass::Flirs {
            light_sleep_period,
            light_sleep_window,
        } = self.cfg.class
        else {
            return None;
        };
        let period = light_sleep_period.as_micros() as u64;
        let window = light_sleep_window.as_micros() as u64;
        let phase = self.light_phase.as_micros() as u64;
        // first window [w, w + window) that ends after `start`
        let n = if start.0 + 1 > phase + window {
            (start.0 + 1 - phase - window).div_ceil(period)
        } else {
            0
        };
        let w = phase + n * period;
        (w < end.0).then(|| SimTime(w.max(start.0)))
    }

    fn idle_deadline(&self) -> SimTime {
        self.awake_until
            .max(self.last_activity + self.cfg.awake_idle_timeout)
    }

    fn ensure_tick(&mut self, ctx: &mut Ctx<'_>) {
        if self.tick_pending || !(self.awake || self.shutdown_since.is_some()) {
            return;
        }
        let period = if self.stats.death.is_some() && self.shutdown_since.is_some() {
            DEAD_BATTERY_TICK
        } else {
            BATTERY_TICK
        };
        self.tick_pending = true;
        ctx.timer(ctx.now + period, NodeTimer::BatteryTick);
    }

    /// Turns the radio on. Returns false if the battery cannot carry the load.
    fn wake(&mut self, ctx: &mut Ctx<'_>, reason: &str) -> bool {
        if !self.is_operable() {
            return false;
        }
        if self.awake {
            self.last_activity = self.last_activity.max(ctx.now);
            return true;
        }
        self.sync(ctx.now);
        self.awake = true;
        self.awake_since = ctx.now;
        self.awake_until = ctx.now;
        self.last_activity = ctx.now;
        ctx.log("wake", reason.to_string());
        let v = self.battery.terminal_voltage(self.awake_current_ma());
        if self.supply.update(v, v) == Some(SupplyTransition::Shutdown) {
            self.enter_shutdown(ctx, v);
            return false;
        }
        if !self.idle_pending {
            self.idle_pending = true;
            ctx.timer(self.idle_deadline(), NodeTimer::IdleCheck);
        }
        if let Some(limit) = defense::meaningful_timeout(&self.cfg.defenses) {
            if !self.meaningful_pending {
                self.meaningful_pending = true;
                ctx.timer(
                    defense::meaningful_deadline(self.awake_since, self.last_meaningful, limit),
                    NodeTimer::MeaningfulCheck,
                );
            }
        }
        self.ensure_tick(ctx);
        true
    }

    fn end_awake_episode(&mut self, now: SimTime) {
        if self.awake {
            let episode = now - self.awake_since;
            self.stats.awake_episodes += 1;
            self.stats.max_awake_episode = self.stats.max_awake_episode.max(episode);
            self.awake = false;
        }
    }

    fn sleep(&mut self, ctx: &mut Ctx<'_>, reason: &str) {
        self.sync(ctx.now);
        self.end_awake_episode(ctx.now);
        ctx.log("sleep", reason.to_string());
    }

    fn enter_shutdown(&mut self, ctx: &mut Ctx<'_>, v: f64) {
        self.sync(ctx.now);
        self.end_awake_episode(ctx.now);
        self.shutdown_since = Some(ctx.now);
        self.stats.shutdowns += 1;
        self.stats.first_shutdown.get_or_insert(ctx.now);
        self.stats.supply_events.push(SupplyEvent {
            time: ctx.now,
            transition: SupplyTransition::Shutdown,
            voltage_v: v,
        });
        ctx.log("shutdown", format!("v={v:.4}"));
        self.ensure_tick(ctx);
    }

    fn reboot(&mut self, ctx: &mut Ctx<'_>, v: f64) {
        self.shutdown_since = None;
        self.stats.reboots += 1;
        self.stats.supply_events.push(SupplyEvent {
            time: ctx.now,
            transition: SupplyTransition::Reboot,
            voltage_v: v,
        });
        ctx.log("reboot", format!("v={v:.4}"));
        if self.wake(ctx, "reboot") {
            self.announce(ctx, FrameKind::WakeupNotification, self.cfg.wakeup_window);
        }
    }

    fn to_controller(&self, kind: FrameKind) -> MacFrame {
        MacFrame::new(self.cfg.home_id, self.cfg.node_id, CONTROLLER_ID, kind)
    }

    fn announce(&mut self, ctx: &mut Ctx<'_>, kind: FrameKind, window: Duration) {
        self.awake_until = self.awake_until.max(ctx.now + window);
        ctx.send(self.to_controller(kind));
        self.flush_alerts(ctx);
    }

    fn flush_alerts(&mut self, ctx: &mut Ctx<'_>) {
        for kind in std::mem::take(&mut self.pending_alerts) {
            ctx.send(self.to_controller(FrameKind::EncryptedPayload(vec![
                ALERT_MARKER,
                kind.code(),
            ])));
        }
    }

    fn raise_alert(&mut self, ctx: &mut Ctx<'_>, cause: AlertCause) {
        let kind = cause.kind();
        if kind == AlertKind::ForcedAwakeTimeout && !self.gate.admit(kind, ctx.now) {
            return;
        }
        self.stats.alerts_raised += 1;
        self.pending_alerts.push(kind);
        ctx.out.push(Output::Alert(SecurityAlert {
            time: ctx.now,
            node: self.cfg.node_id,
            cause,
        }));
    }

    /// Arms the class timers and schedules the power-on announcement.
    pub fn start(&mut self, ctx: &mut Ctx<'_>) {
        let stagger = Duration::from_millis(10 * u64::from(self.cfg.node_id));
        ctx.timer(ctx.now + stagger, NodeTimer::Boot);
        if let DeviceClass::WakeupInterval {
            wakeup_interval,
            heartbeat_interval,
        } = self.cfg.class
        {
            let phase = self.cfg.heartbeat_phase.unwrap_or(heartbeat_interval);
            ctx.timer(ctx.now + phase, NodeTimer::Heartbeat);
            ctx.timer(ctx.now + wakeup_interval, NodeTimer::Wakeup);
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_>, timer: NodeTimer) {
        self.sync(ctx.now);
        match timer {
            NodeTimer::Boot => {
                if self.wake(ctx, "boot") {
                    self.announce(ctx, FrameKind::WakeupNotification, self.cfg.wakeup_window);
                }
            }
            NodeTimer::Heartbeat => {
                if let DeviceClass::WakeupInterval {
                    heartbeat_interval, ..
                } = self.cfg.class
                {
                    ctx.timer(ctx.now + heartbeat_interval, NodeTimer::Heartbeat);
                }
                if self.wake(ctx, "heartbeat") {
                    self.announce(ctx, FrameKind::BatteryReport, self.cfg.heartbeat_window);
                }
            }
            NodeTimer::Wakeup => {
                if let DeviceClass::WakeupInterval {
                    wakeup_interval, ..
                } = self.cfg.class
                {
                    ctx.timer(ctx.now + wakeup_interval, NodeTimer::Wakeup);
                }
                if self.wake(ctx, "wakeup_interval") {
                    self.announce(ctx, FrameKind::WakeupNotification, self.cfg.wakeup_window);
                }
            }
            NodeTimer::IdleCheck => {
                self.idle_pending = false;
                if !self.awake {
                    return;
                }
                let deadline = self.idle_deadline();
                if ctx.now >= deadline {
                    self.sleep(ctx, "idle");
                } else {
                    self.idle_pending = true;
                    ctx.timer(deadline, NodeTimer::IdleCheck);
                }
            }
            NodeTimer::MeaningfulCheck => {
                self.meaningful_pending = false;
                let Some(limit) = defense::meaningful_timeout(&self.cfg.defenses) else {
                    return;
                };
                if !self.awake {
                    return;
                }
                if defense::apply_meaningful_timeout(
                    self.awake_since,
                    self.last_meaningful,
                    limit,
                    ctx.now,
                ) {
                    self.stats.forced_sleeps += 1;
                    self.sleep(ctx, "forced");
                    self.raise_alert(ctx, AlertCause::ForcedAwakeTimeout);
                } else {
                    self.meaningful_pending = true;
                    ctx.timer(
                        defense::meaningful_deadline(self.awake_since, self.last_meaningful, limit),
                        NodeTimer::MeaningfulCheck,
                    );
                }
            }
            NodeTimer::BatteryTick => {
                self.tick_pending = false;
                self.battery_tick(ctx);
            }
            NodeTimer::DosCheck => {}
        }
    }

    fn poll_supply(&mut self, ctx: &mut Ctx<'_>) {
        let loaded = self.terminal_voltage();
        let resting = self.battery.terminal_voltage(0.0);
        match self.supply.update(loaded, resting) {
            Some(SupplyTransition::Shutdown) => self.enter_shutdown(ctx, loaded),
            Some(SupplyTransition::Reboot) => self.reboot(ctx, resting),
            None => {}
        }
    }

    fn battery_tick(&mut self, ctx: &mut Ctx<'_>) {
        self.poll_supply(ctx);
        if let Some(since) = self.shutdown_since {
            if self.stats.death.is_none() && ctx.now.since(since) >= DEATH_WINDOW {
                self.stats.death = Some(since);
                ctx.log("death", format!("since={}", since.0));
            }
        }
        self.ensure_tick(ctx);
    }

    fn respond(&mut self, ctx: &mut Ctx<'_>, to: u8, kinds: Vec<FrameKind>) {
        let n = kinds.len();
        for kind in kinds {
            ctx.send(MacFrame::new(self.cfg.home_id, self.cfg.node_id, to, kind));
            self.responses.push(ctx.now);
        }
        self.stats.responses += n as u64;
        self.stats.first_response.get_or_insert(ctx.now);
    }

    /// Handles a delivered frame. `beam_end` is the end of the beam train for beam deliveries.
    pub fn on_receive(&mut self, ctx: &mut Ctx<'_>, frame: &Frame, beam_end: SimTime) {
        if !self.is_operable() {
            return;
        }
        self.sync(ctx.now);
        match frame {
            Frame::Beam(beam) => self.on_beam(ctx, beam, beam_end),
            Frame::Mac(mac) => self.on_mac(ctx, mac),
        }
    }

    fn on_beam(&mut self, ctx: &mut Ctx<'_>, beam: &BeamFrame, beam_end: SimTime) {
        if !self.is_flirs()
            || beam.node_id != self.cfg.node_id
            || beam.home_id_hash != crate::codec::home_id_hash(self.cfg.home_id)
        {
            return;
        }
        // the radio stays on through the rest of the train
        if self.awake || self.wake(ctx, "beam") {
            self.last_activity = self.last_activity.max(beam_end);
        }
    }

    fn on_mac(&mut self, ctx: &mut Ctx<'_>, frame: &MacFrame) {
        if !self.awake || frame.home_id != self.cfg.home_id {
            return;
        }
        let verdict = defense::apply_spoof_detection(
            self.cfg.node_id,
            self.cfg.home_id,
            frame,
            ctx.now,
            defense::spoof_action(&self.cfg.defenses),
            &mut self.gate,
        );
        if verdict.spoofed {
            if let Some(until) = verdict.distrust_until {
                self.distrust_until = self.distrust_until.max(until);
            }
            if let Some(alert) = verdict.alert {
                self.stats.alerts_raised += 1;
                self.pending_alerts.push(alert.cause.kind());
                ctx.out.push(Output::Alert(alert));
            }
            return;
        }
        if frame.dest_id != self.cfg.node_id && frame.dest_id != BROADCAST_ID {
            return;
        }
        if ctx.now < self.distrust_until && !frame.kind.requires_encryption() {
            return;
        }
        if !self.known.contains(&frame.source_id) {
            return;
        }
        self.last_activity = ctx.now;
        match &frame.kind {
            FrameKind::NonceGet => {
                self.requests.push(ctx.now);
                let mut nonce = [0u8; NONCE_LEN];
                ctx.rng.fill_bytes(&mut nonce);
                self.respond(
                    ctx,
                    frame.source_id,
                    vec![FrameKind::Ack, FrameKind::NonceReport(nonce)],
                );
            }
            FrameKind::ConfigurationGet => {
                self.requests.push(ctx.now);
                self.respond(ctx, frame.source_id, vec![FrameKind::Ack]);
            }
            FrameKind::EncryptedPayload(_) => {
                self.last_meaningful = Some(ctx.now);
                self.respond(ctx, frame.source_id, vec![FrameKind::Ack]);
            }
            _ => {}
        }
        if !self.pending_alerts.is_empty() && frame.source_id == CONTROLLER_ID {
            self.flush_alerts(ctx);
        }
    }

    /// Requests (NonceGet, ConfigurationGet) received in the last second.
    pub fn request_rate(&mut self, now: SimTime) -> usize {
        self.requests.count(now)
    }

    pub fn sense(&mut self, ctx: &mut Ctx<'_>, stimulus: StimulusKind) -> SenseOutcome {
        self.sync(ctx.now);
        // the periodic tick may not have run yet at this instant
        self.poll_supply(ctx);
        let outcome = if !self.is_operable() {
            SenseOutcome::Suppressed(SuppressReason::BelowCutoff)
        } else if self.request_rate(ctx.now) >= self.cfg.overload_threshold as usize {
            SenseOutcome::Suppressed(SuppressReason::Overloaded)
        } else if !self.wake(ctx, stimulus.name()) {
            SenseOutcome::Suppressed(SuppressReason::BelowCutoff)
        } else {
            let report = self.to_controller(FrameKind::EncryptedPayload(vec![
                REPORT_MARKER,
                stimulus.code(),
            ]));
            self.last_activity = ctx.now;
            self.announce(ctx, report.kind.clone(), self.cfg.wakeup_window);
            SenseOutcome::Report(report)
        };
        match &outcome {
            SenseOutcome::Report(_) => {
                self.stats.reports += 1;
                ctx.log("report", stimulus.name().to_string());
            }
            SenseOutcome::Suppressed(reason) => {
                self.stats.suppressed += 1;
                ctx.log("suppressed", format!("{} {reason:?}", stimulus.name()));
            }
        }
        outcome
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ControllerState {
    Operational,
    DeniedService,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub home_id: u32,
    pub position: Position,
    pub range_m: f64,
    pub dos_threshold_pps: u32,
    pub dos_cooldown: Duration,
    pub defenses: Vec<DefensePolicy>,
}

impl ControllerConfig {
    pub fn new(home_id: u32) -> Self {
        ControllerConfig {
            home_id,
            position: Position::new(0.0, 0.0),
            range_m: 100.0,
            dos_threshold_pps: 50,
            dos_cooldown: Duration::from_secs(5),
            defenses: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ControllerStats {
    pub alarms: u64,
    pub suppressed_alarms: u64,
    pub alerts_received: u64,
    pub dos_episodes: u64,
    pub denied_us: u64,
    pub alerts_raised: u64,
}

pub struct Controller {
    pub cfg: ControllerConfig,
    pub state: ControllerState,
    known: BTreeSet<u8>,
    inbound: RateWindow,
    last_at_threshold: SimTime,
    denied_since: SimTime,
    queues: BTreeMap<u8, VecDeque<FrameKind>>,
    gate: AlertGate,
    distrust_until: SimTime,
    pub stats: ControllerStats,
}

impl Controller {
    pub fn new(cfg: ControllerConfig) -> Self {
        Controller {
            cfg,
            state: ControllerState::Operational,
            known: BTreeSet::new(),
            inbound: RateWindow::new(RATE_WINDOW),
            last_at_threshold: SimTime::ZERO,
            denied_since: SimTime::ZERO,
            queues: BTreeMap::new(),
            gate: AlertGate::default(),
            distrust_until: SimTime::ZERO,
            stats: ControllerStats::default(),
        }
    }

    pub fn node_id(&self) -> u8 {
        CONTROLLER_ID
    }

    pub fn learn(&mut self, node: u8) {
        self.known.insert(node);
    }

    pub fn is_denied(&self) -> bool {
        self.state == ControllerState::DeniedService
    }

    pub fn denied_time(&self, now: SimTime) -> Duration {
        let mut us = self.stats.denied_us;
        if self.is_denied() {
            us += now.since(self.denied_since).as_micros() as u64;
        }
        Duration::from_micros(us)
    }

    fn send(&self, ctx: &mut Ctx<'_>, to: u8, kind: FrameKind) {
        ctx.send(MacFrame::new(self.cfg.home_id, CONTROLLER_ID, to, kind));
    }

    pub fn on_receive(&mut self, ctx: &mut Ctx<'_>, frame: &Frame) {
        let Frame::Mac(frame) = frame else {
            return;
        };
        if frame.home_id != self.cfg.home_id {
            return;
        }
        let verdict = defense::apply_spoof_detection(
            CONTROLLER_ID,
            self.cfg.home_id,
            frame,
            ctx.now,
            defense::spoof_action(&self.cfg.defenses),
            &mut self.gate,
        );
        if verdict.spoofed {
            if let Some(until) = verdict.distrust_until {
                self.distrust_until = self.distrust_until.max(until);
            }
            if let Some(alert) = verdict.alert {
                self.stats.alerts_raised += 1;
                ctx.out.push(Output::Alert(alert));
            }
            return;
        }
        if frame.dest_id != CONTROLLER_ID && frame.dest_id != BROADCAST_ID {
            return;
        }
        let rate = self.inbound.push(ctx.now);
        if rate >= self.cfg.dos_threshold_pps as usize {
            self.last_at_threshold = ctx.now;
            if self.state == ControllerState::Operational {
                self.state = ControllerState::DeniedService;
                self.denied_since = ctx.now;
                self.stats.dos_episodes += 1;
                ctx.log("denied_service", format!("rate={rate}"));
                ctx.timer(ctx.now + DOS_CHECK_PERIOD, NodeTimer::DosCheck);
            }
        }
        let is_report = matches!(&frame.kind, FrameKind::EncryptedPayload(p) if p.first() == Some(&REPORT_MARKER));
        if self.is_denied() {
            if is_report {
                self.stats.suppressed_alarms += 1;
                ctx.log(
                    "alarm_suppressed",
                    format!("src={:02x}", frame.source_id),
                );
            }
            return;
        }
        if ctx.now < self.distrust_until && !frame.kind.requires_encryption() {
            return;
        }
        if !self.known.contains(&frame.source_id) {
            return;
        }
        let src = frame.source_id;
        match &frame.kind {
            FrameKind::EncryptedPayload(p) => {
                match p.as_slice() {
                    [ALERT_MARKER, code, ..] => {
                        self.stats.alerts_received += 1;
                        let kind = AlertKind::from_code(*code)
                            .map(|k| k.to_string())
                            .unwrap_or_else(|| "unknown".into());
                        ctx.log("alert_received", format!("src={src:02x} {kind}"));
                    }
                    _ => {
                        self.stats.alarms += 1;
                        ctx.log("alarm", format!("src={src:02x}"));
                    }
                }
                self.send(ctx, src, FrameKind::Ack);
            }
            FrameKind::WakeupNotification => {
                self.send(ctx, src, FrameKind::Ack);
                if let Some(queue) = self.queues.get_mut(&src) {
                    let pending: Vec<_> = queue.drain(..).collect();
                    for kind in pending {
                        self.send(ctx, src, kind);
                    }
                }
            }
            FrameKind::BatteryReport | FrameKind::ConfigurationGet => {
                self.send(ctx, src, FrameKind::Ack);
            }
            FrameKind::NonceGet => {
                let mut nonce = [0u8; NONCE_LEN];
                ctx.rng.fill_bytes(&mut nonce);
                self.send(ctx, src, FrameKind::Ack);
                self.send(ctx, src, FrameKind::NonceReport(nonce));
            }
            FrameKind::Ack | FrameKind::NonceReport(_) | FrameKind::Generic(_) => {}
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_>, timer: NodeTimer) {
        if timer != NodeTimer::DosCheck || !self.is_denied() {
            return;
        }
        let rate = self.inbound.count(ctx.now);
        if rate >= self.cfg.dos_threshold_pps as usize {
            self.last_at_threshold = ctx.now;
        }
        if ctx.now.since(self.last_at_threshold) >= self.cfg.dos_cooldown {
            self.state = ControllerState::Operational;
            self.stats.denied_us += ctx.now.since(self.denied_since).as_micros() as u64;
            ctx.log("operational", format!("rate={rate}"));
        } else {
            ctx.timer(ctx.now + DOS_CHECK_PERIOD, NodeTimer::DosCheck);
        }
    }

    /// Sends an encrypted command now, or queues it for the device's next wakeup.
    pub fn command(&mut self, ctx: &mut Ctx<'_>, target: u8, queued: bool) {
        let kind = FrameKind::EncryptedPayload(vec![0x30, target]);
        if queued {
            self.queues.entry(target).or_default().push_back(kind);
            ctx.log("queued", format!("dst={target:02x}"));
        } else if !self.is_denied() {
            self.send(ctx, target, kind);
        }
    }
}
