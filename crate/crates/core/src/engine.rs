//! The event loop. Owns every node, the channel, the clock and the outputs,
//! and turns handler [`Output`]s into scheduled transmissions and timers.
//!
//! Channel indices: 0 is the controller, `1..=n` the devices in scenario
//! order, `n + 1` the attacker when there is one.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attacker::{rank, Attacker, AttackerOutput, AttackerTimer};
use crate::battery::SupplyTransition;
use crate::codec::{encode_frame, Frame, FrameKind};
use crate::device::{
    Controller, Ctx, DeviceClass, NodeTimer, Output, PowerState, SenseOutcome, SensorDevice,
    StimulusKind, SuppressReason,
};
use crate::report::{
    AlertRecord, AttackerReport, ControllerReport, DeviceReport, MetricRow, ProbeRecord,
    RunReport, StimulusRecord, SupplyRecord,
};
use crate::scenario::{self, Diagnostic, Scenario};
use crate::sim::{airtime, ChannelNode, EventLog, EventQueue, RadioChannel, SimTime};

const SNIFF_WINDOW: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid scenario: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
    #[error("invariant violated at {at}: {message}")]
    Invariant { at: SimTime, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl From<csv::Error> for EngineError {
    fn from(e: csv::Error) -> Self {
        EngineError::Io(io::Error::other(e))
    }
}

impl From<serde_json::Error> for EngineError {
    fn from(e: serde_json::Error) -> Self {
        EngineError::Io(io::Error::other(e))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where `events.log`, `metrics.csv` and `report.json` go. Nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Also return the metrics rows in memory.
    pub keep_metrics: bool,
}

impl RunOptions {
    pub fn to_dir(dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            out_dir: Some(dir.into()),
            keep_metrics: false,
        }
    }

    pub fn in_memory() -> Self {
        RunOptions {
            out_dir: None,
            keep_metrics: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub metrics: Vec<MetricRow>,
}

#[derive(Debug)]
enum Event {
    TxStart {
        tx: usize,
        frame: Arc<Frame>,
        air: Duration,
    },
    Deliver {
        rx: usize,
        tx: usize,
        frame: Arc<Frame>,
        beam_end: SimTime,
    },
    Device(usize, NodeTimer),
    Controller(NodeTimer),
    Stimulus(usize),
    Attacker(AttackerTimer),
    Sample,
}

#[derive(Default, Clone, Copy)]
struct SniffCount {
    first: Option<SimTime>,
    in_window: u64,
}

struct World<'a> {
    scn: &'a Scenario,
    end: SimTime,
    rng: ChaCha8Rng,
    controller: Controller,
    devices: Vec<SensorDevice>,
    attacker: Option<Attacker>,
    channel: RadioChannel,
    tx_free: Vec<SimTime>,
    labels: Vec<String>,
    log: EventLog,
    alerts: Vec<AlertRecord>,
    stimuli: Vec<StimulusRecord>,
    energy_at_first_response: Vec<Option<f64>>,
    sniffed: Vec<SniffCount>,
    metrics_csv: Option<csv::Writer<BufWriter<File>>>,
    metrics: Option<Vec<MetricRow>>,
    last_sample: SimTime,
    last_energy: Vec<f64>,
    failure: Option<EngineError>,
    stopped_at: Option<SimTime>,
    events: u64,
}

fn attacker_ix(n_devices: usize) -> usize {
    n_devices + 1
}

fn power_state_name(d: &SensorDevice, now: SimTime) -> &'static str {
    if !d.is_operable() {
        return "shutdown";
    }
    match d.power_state(now) {
        PowerState::Awake => "awake",
        PowerState::LightSleep => "light_sleep",
        PowerState::DeepSleep => "deep_sleep",
    }
}

fn describe(frame: &Frame) -> String {
    match frame {
        Frame::Mac(m) => format!(
            "{} {:02x}->{:02x} home={:08X}",
            m.kind.name(),
            m.source_id,
            m.dest_id,
            m.home_id
        ),
        Frame::Beam(b) => format!("beam node={:02x} len={}", b.node_id, b.total_length),
    }
}

impl<'a> World<'a> {
    fn new(scn: &'a Scenario, opts: &RunOptions) -> Result<Self, EngineError> {
        let mut rng = ChaCha8Rng::seed_from_u64(scn.seed);
        let mut controller = Controller::new(scn.controller.clone());
        let mut devices = Vec::with_capacity(scn.devices.len());
        for cfg in &scn.devices {
            let phase = match cfg.class {
                DeviceClass::Flirs {
                    light_sleep_period, ..
                } => Duration::from_micros(rng.gen_range(0..light_sleep_period.as_micros() as u64)),
                _ => Duration::ZERO,
            };
            let mut d = SensorDevice::new(cfg.clone(), phase);
            for other in &scn.devices {
                if other.home_id == cfg.home_id && other.node_id != cfg.node_id {
                    d.learn(other.node_id);
                }
            }
            if cfg.home_id == scn.controller.home_id {
                controller.learn(cfg.node_id);
            }
            devices.push(d);
        }

        let mut nodes = vec![ChannelNode {
            position: scn.controller.position,
            range_m: scn.controller.range_m,
        }];
        let mut labels = vec!["ctrl".to_string()];
        for cfg in &scn.devices {
            nodes.push(ChannelNode {
                position: cfg.position,
                range_m: cfg.range_m,
            });
            labels.push(format!("dev{:02x}", cfg.node_id));
        }
        let attacker = scn.attacker.clone().map(|cfg| {
            nodes.push(ChannelNode {
                position: cfg.position,
                range_m: cfg.range_m,
            });
            labels.push("atk".to_string());
            Attacker::new(cfg)
        });

        let (log, metrics_csv) = match &opts.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let log_file = BufWriter::new(File::create(dir.join("events.log"))?);
                let csv = csv::Writer::from_writer(BufWriter::new(File::create(
                    dir.join("metrics.csv"),
                )?));
                (EventLog::new(scn.log_mode, Box::new(log_file)), Some(csv))
            }
            None => (EventLog::discard(), None),
        };

        let n = devices.len();
        Ok(World {
            scn,
            end: SimTime::ZERO + scn.duration,
            rng,
            controller,
            tx_free: vec![SimTime::ZERO; nodes.len()],
            channel: RadioChannel::new(nodes),
            labels,
            log,
            alerts: Vec::new(),
            stimuli: Vec::new(),
            energy_at_first_response: vec![None; n],
            sniffed: vec![SniffCount::default(); n],
            metrics_csv,
            metrics: opts.keep_metrics.then(Vec::new),
            last_sample: SimTime::ZERO,
            last_energy: vec![0.0; n],
            failure: None,
            stopped_at: None,
            events: 0,
            devices,
            attacker,
        })
    }

    fn fail(&mut self, at: SimTime, message: String) {
        if self.failure.is_none() {
            self.failure = Some(EngineError::Invariant { at, message });
        }
    }

    fn schedule(&mut self, q: &mut EventQueue<Event>, at: SimTime, e: Event) {
        let now = q.now();
        if let Err(err) = q.schedule(at.max(now), e) {
            self.fail(now, err.to_string());
        }
    }

    fn boot(&mut self, q: &mut EventQueue<Event>) {
        self.log.record(
            SimTime::ZERO,
            "sim",
            "start",
            format_args!("scenario={} seed={}", self.scn.name, self.scn.seed),
            false,
        );
        for ix in 0..self.devices.len() {
            self.with_device(q, ix, |d, ctx| d.start(ctx));
        }
        if let Some(a) = &self.attacker {
            let at = a.cfg.start;
            self.schedule(q, at, Event::Attacker(AttackerTimer::Start));
        }
        for (i, s) in self.scn.stimuli.iter().enumerate() {
            q.schedule(s.at, Event::Stimulus(i)).ok();
        }
        let first = SimTime::ZERO + self.scn.sample_interval;
        self.schedule(q, first, Event::Sample);
    }

    fn with_device(
        &mut self,
        q: &mut EventQueue<Event>,
        ix: usize,
        f: impl FnOnce(&mut SensorDevice, &mut Ctx<'_>),
    ) {
        let now = q.now();
        let mut ctx = Ctx::new(now, &mut self.rng);
        let dev = &mut self.devices[ix];
        let had_response = dev.stats.first_response.is_some();
        f(dev, &mut ctx);
        let out = std::mem::take(&mut ctx.out);
        if !had_response && dev.stats.first_response.is_some() {
            self.energy_at_first_response[ix] = Some(dev.energy_mj());
        }
        self.apply(q, ix + 1, out);
    }

    fn with_controller(
        &mut self,
        q: &mut EventQueue<Event>,
        f: impl FnOnce(&mut Controller, &mut Ctx<'_>),
    ) {
        let mut ctx = Ctx::new(q.now(), &mut self.rng);
        f(&mut self.controller, &mut ctx);
        let out = std::mem::take(&mut ctx.out);
        self.apply(q, 0, out);
    }

    fn apply(&mut self, q: &mut EventQueue<Event>, node: usize, out: Vec<Output>) {
        let now = q.now();
        for o in out {
            match o {
                Output::Transmit(frame) => self.transmit(q, node, frame, None, true),
                Output::Timer { at, timer } => {
                    let e = if node == 0 {
                        Event::Controller(timer)
                    } else {
                        Event::Device(node - 1, timer)
                    };
                    self.schedule(q, at, e);
                }
                Output::Log { kind, detail } => {
                    self.log
                        .record(now, &self.labels[node], kind, format_args!("{detail}"), false);
                }
                Output::Alert(alert) => {
                    let kind = alert.cause.kind().to_string();
                    self.log.record(
                        now,
                        &self.labels[node],
                        "alert",
                        format_args!("{kind} {:?}", alert.cause),
                        false,
                    );
                    self.alerts.push(AlertRecord {
                        time_s: alert.time.as_secs_f64(),
                        node: alert.node,
                        kind,
                    });
                }
            }
        }
    }

    /// Queues a transmission. Handlers' frames go out back to back on their
    /// node's radio; the attacker keys its own schedule and is not serialized.
    fn transmit(
        &mut self,
        q: &mut EventQueue<Event>,
        tx: usize,
        frame: Frame,
        train: Option<Duration>,
        serialize: bool,
    ) {
        let now = q.now();
        let bytes = match encode_frame(&frame) {
            Ok(b) => b,
            Err(e) => {
                self.fail(now, format!("{} cannot encode {}: {e}", self.labels[tx], describe(&frame)));
                return;
            }
        };
        let air = train.unwrap_or_else(|| airtime(bytes.len()));
        let start = if serialize { now.max(self.tx_free[tx]) } else { now };
        self.tx_free[tx] = self.tx_free[tx].max(start + air);
        self.schedule(
            q,
            start,
            Event::TxStart {
                tx,
                frame: Arc::new(frame),
                air,
            },
        );
    }

    fn start_tx(&mut self, q: &mut EventQueue<Event>, tx: usize, frame: Arc<Frame>, air: Duration) {
        let now = q.now();
        let end = now + air;
        self.log.record(
            now,
            &self.labels[tx],
            "tx",
            format_args!("{} air_us={}", describe(&frame), air.as_micros()),
            true,
        );
        let n = self.devices.len();
        let receivers = self.channel.broadcast(tx, |_| true);
        for rx in receivers {
            let at = if rx == 0 {
                // the controller ignores beams
                frame.as_mac().map(|_| end)
            } else if rx <= n {
                let d = &self.devices[rx - 1];
                match &*frame {
                    Frame::Mac(_) => d.can_receive_mac().then_some(end),
                    Frame::Beam(_) => d.beam_catch_time(now, end),
                }
            } else {
                Some(end)
            };
            if let Some(at) = at {
                self.schedule(
                    q,
                    at,
                    Event::Deliver {
                        rx,
                        tx,
                        frame: Arc::clone(&frame),
                        beam_end: end,
                    },
                );
            }
        }
    }

    fn deliver(&mut self, q: &mut EventQueue<Event>, rx: usize, tx: usize, frame: &Frame, beam_end: SimTime) {
        let now = q.now();
        let n = self.devices.len();
        if rx <= n {
            self.log.record(
                now,
                &self.labels[rx],
                "rx",
                format_args!("from={} {}", self.labels[tx], describe(frame)),
                true,
            );
        }
        if rx == 0 {
            self.with_controller(q, |c, ctx| c.on_receive(ctx, frame));
        } else if rx <= n {
            self.with_device(q, rx - 1, |d, ctx| d.on_receive(ctx, frame, beam_end));
        } else if let Some(a) = &mut self.attacker {
            a.on_sniff(frame, now);
            if let Frame::Mac(m) = frame {
                if matches!(m.kind, FrameKind::NonceReport(_)) && (1..=n).contains(&tx) {
                    let s = &mut self.sniffed[tx - 1];
                    let first = *s.first.get_or_insert(now);
                    if now.since(first) < SNIFF_WINDOW {
                        s.in_window += 1;
                    }
                }
            }
        }
    }

    fn on_attacker(&mut self, q: &mut EventQueue<Event>, timer: AttackerTimer) {
        let now = q.now();
        let Some(a) = &mut self.attacker else {
            return;
        };
        let out = a.on_timer(now, timer);
        let atk = attacker_ix(self.devices.len());
        for o in out {
            match o {
                AttackerOutput::Transmit { frame, train } => {
                    let a = self.attacker.as_ref().expect("attacker present");
                    if let Err(msg) = a.knowledge.check_honest(&frame, a.forged_home()) {
                        self.fail(now, format!("attacker used unsniffed identifiers: {msg}"));
                        return;
                    }
                    self.transmit(q, atk, frame, train, false);
                }
                AttackerOutput::Timer { at, timer } => self.schedule(q, at, Event::Attacker(timer)),
                AttackerOutput::Log { kind, detail } => {
                    self.log
                        .record(now, &self.labels[atk], kind, format_args!("{detail}"), false);
                }
            }
        }
        if matches!(timer, AttackerTimer::Monitor) {
            let a = self.attacker.as_ref().expect("attacker present");
            if a.cfg.stop_when_ranked && a.all_ranked() {
                self.log.record(now, "atk", "probe_complete", format_args!(""), false);
                self.stopped_at = Some(now);
            }
        }
    }

    fn on_stimulus(&mut self, q: &mut EventQueue<Event>, i: usize) {
        let now = q.now();
        let s = self.scn.stimuli[i].clone();
        if let Some(every) = s.every.filter(|e| !e.is_zero()) {
            let next = now + every;
            if next <= s.until.unwrap_or(self.end) {
                self.schedule(q, next, Event::Stimulus(i));
            }
        }
        if s.kind.is_sensed() {
            let Some(ix) = self.devices.iter().position(|d| d.node_id() == s.target) else {
                return;
            };
            self.log
                .record(now, &self.labels[ix + 1], "stimulus", format_args!("{}", s.kind.name()), false);
            let mut outcome = None;
            self.with_device(q, ix, |d, ctx| outcome = Some(d.sense(ctx, s.kind)));
            let outcome = match outcome {
                Some(SenseOutcome::Report(_)) => "report",
                Some(SenseOutcome::Suppressed(SuppressReason::BelowCutoff)) => "suppressed_below_cutoff",
                _ => "suppressed_overloaded",
            };
            self.stimuli.push(StimulusRecord {
                time_s: now.as_secs_f64(),
                node: s.target,
                kind: s.kind.name().into(),
                outcome: outcome.into(),
            });
        } else {
            let queued = s.kind == StimulusKind::Queue;
            self.log
                .record(now, "ctrl", "stimulus", format_args!("{} dst={:02x}", s.kind.name(), s.target), false);
            let outcome = if queued {
                "queued"
            } else if self.controller.is_denied() {
                "dropped"
            } else {
                "sent"
            };
            self.with_controller(q, |c, ctx| c.command(ctx, s.target, queued));
            self.stimuli.push(StimulusRecord {
                time_s: now.as_secs_f64(),
                node: s.target,
                kind: s.kind.name().into(),
                outcome: outcome.into(),
            });
        }
    }

    fn sample(&mut self, now: SimTime) -> Result<(), EngineError> {
        let dt = now.since(self.last_sample).as_secs_f64();
        if dt <= 0.0 {
            return Ok(());
        }
        let t = now.as_secs_f64();
        let mut rows = Vec::with_capacity(self.devices.len() + 1);
        rows.push(MetricRow {
            time_s: t,
            node: self.labels[0].clone(),
            role: "controller".into(),
            avg_power_mw: None,
            voltage_v: None,
            state: if self.controller.is_denied() {
                "denied".into()
            } else {
                "operational".into()
            },
            responses_last_min: None,
        });
        for (ix, d) in self.devices.iter_mut().enumerate() {
            d.sync(now);
            let e = d.energy_mj();
            let power = (e - self.last_energy[ix]) / dt;
            self.last_energy[ix] = e;
            rows.push(MetricRow {
                time_s: t,
                node: self.labels[ix + 1].clone(),
                role: d.cfg.profile.name().into(),
                avg_power_mw: Some(power),
                voltage_v: Some(d.terminal_voltage()),
                state: power_state_name(d, now).into(),
                responses_last_min: Some(d.responses_last_minute(now) as u64),
            });
        }
        if let Some(a) = &mut self.attacker {
            for det in a.detectors_mut() {
                let target = det.target;
                rows.push(MetricRow {
                    time_s: t,
                    node: format!("dev{target:02x}"),
                    role: "probe".into(),
                    avg_power_mw: None,
                    voltage_v: None,
                    state: if det.is_done() { "ranked" } else { "probing" }.into(),
                    responses_last_min: Some(det.rate(now) as u64),
                });
            }
        }
        self.last_sample = now;
        if let Some(w) = &mut self.metrics_csv {
            for r in &rows {
                w.serialize(r)?;
            }
        }
        if let Some(m) = &mut self.metrics {
            m.extend(rows);
        }
        Ok(())
    }

    fn handle(&mut self, q: &mut EventQueue<Event>, e: Event) -> Result<(), EngineError> {
        self.events += 1;
        match e {
            Event::TxStart { tx, frame, air } => self.start_tx(q, tx, frame, air),
            Event::Deliver {
                rx,
                tx,
                frame,
                beam_end,
            } => self.deliver(q, rx, tx, &frame, beam_end),
            Event::Device(ix, timer) => self.with_device(q, ix, |d, ctx| d.on_timer(ctx, timer)),
            Event::Controller(timer) => self.with_controller(q, |c, ctx| c.on_timer(ctx, timer)),
            Event::Stimulus(i) => self.on_stimulus(q, i),
            Event::Attacker(timer) => self.on_attacker(q, timer),
            Event::Sample => {
                let now = q.now();
                self.sample(now)?;
                let next = now + self.scn.sample_interval;
                if next <= self.end {
                    self.schedule(q, next, Event::Sample);
                }
            }
        }
        Ok(())
    }

    fn run(mut self, opts: &RunOptions) -> Result<RunOutput, EngineError> {
        let mut q = EventQueue::new();
        self.boot(&mut q);
        while let Some((_, e)) = q.pop_until(self.end) {
            self.handle(&mut q, e)?;
            if let Some(err) = self.failure.take() {
                return Err(err);
            }
            if self.stopped_at.is_some() {
                break;
            }
        }
        let t_end = self.stopped_at.unwrap_or(self.end);
        for d in &mut self.devices {
            d.sync(t_end);
        }
        if t_end > self.last_sample {
            self.sample(t_end)?;
        }
        if let Some(a) = &mut self.attacker {
            a.finish();
        }
        self.log
            .record(t_end, "sim", "end", format_args!("events={}", self.events), false);
        if let Some(w) = &mut self.metrics_csv {
            w.flush()?;
        }
        let report = self.build_report(t_end)?;
        if let Some(dir) = &opts.out_dir {
            let file = BufWriter::new(File::create(dir.join("report.json"))?);
            serde_json::to_writer_pretty(file, &report)?;
        }
        Ok(RunOutput {
            report,
            metrics: self.metrics.take().unwrap_or_default(),
        })
    }

    fn build_report(&mut self, t_end: SimTime) -> Result<RunReport, EngineError> {
        let secs = |t: SimTime| t.as_secs_f64();
        let atk = self.attacker.as_ref().map(|_| attacker_ix(self.devices.len()));
        let mut devices = Vec::with_capacity(self.devices.len());
        for (ix, d) in self.devices.iter().enumerate() {
            let st = &d.stats;
            let energy = d.energy_mj();
            let fr = st.first_response;
            let e_fr = self.energy_at_first_response[ix];
            let attack_avg = match (fr, e_fr) {
                (Some(fr), Some(e0)) => {
                    let until = st.death.unwrap_or(t_end).min(t_end);
                    let span = until.since(fr).as_secs_f64();
                    (span > 0.0).then(|| (energy - e0) / span)
                }
                _ => None,
            };
            let drain = match (fr, st.death) {
                (Some(fr), Some(death)) if death > fr => Some(death.since(fr).as_secs_f64()),
                _ => None,
            };
            let onset_fraction = match (fr, st.first_shutdown, drain) {
                (Some(fr), Some(onset), Some(total)) => Some(onset.since(fr).as_secs_f64() / total),
                _ => None,
            };
            let sniffed = self.sniffed[ix];
            devices.push(DeviceReport {
                node_id: d.node_id(),
                profile: d.cfg.profile.name().into(),
                class: d.cfg.class.name().into(),
                distance_to_attacker_m: atk.map(|a| self.channel.distance(ix + 1, a)),
                soc_initial: d.cfg.soc,
                soc_final: d.battery().state_of_charge(),
                voltage_final_v: d.terminal_voltage(),
                energy_mj: energy,
                avg_power_mw: energy / secs(t_end).max(f64::MIN_POSITIVE),
                sleep_power_mw: d.cfg.sleep_power_mw,
                awake_power_mw: d.cfg.awake_power_mw * d.cfg.rx_power_multiplier,
                first_response_s: fr.map(secs),
                energy_at_first_response_mj: e_fr,
                attack_avg_power_mw: attack_avg,
                amplification: attack_avg.map(|p| p / d.cfg.sleep_power_mw),
                ramping_onset_s: st.first_shutdown.map(secs),
                death_s: st.death.map(secs),
                drain_time_s: drain,
                onset_fraction,
                shutdowns: st.shutdowns,
                reboots: st.reboots,
                supply_events: st
                    .supply_events
                    .iter()
                    .map(|e| SupplyRecord {
                        time_s: secs(e.time),
                        kind: match e.transition {
                            SupplyTransition::Shutdown => "shutdown".into(),
                            SupplyTransition::Reboot => "reboot".into(),
                        },
                        voltage_v: e.voltage_v,
                    })
                    .collect(),
                responses: st.responses,
                sniffed_reports_first_minute: sniffed.first.map(|_| sniffed.in_window),
                awake_episodes: st.awake_episodes,
                max_awake_episode_s: st.max_awake_episode.as_secs_f64(),
                forced_sleeps: st.forced_sleeps,
                reports: st.reports,
                suppressed: st.suppressed,
                alerts_raised: st.alerts_raised,
            });
        }
        let c = &self.controller;
        let controller = ControllerReport {
            alarms: c.stats.alarms,
            suppressed_alarms: c.stats.suppressed_alarms,
            alerts_received: c.stats.alerts_received,
            dos_episodes: c.stats.dos_episodes,
            denied_s: c.denied_time(t_end).as_secs_f64(),
            alerts_raised: c.stats.alerts_raised,
            final_state: if c.is_denied() { "denied" } else { "operational" }.into(),
        };
        let attacker = self.attacker.as_ref().map(|a| {
            let ix = attacker_ix(self.devices.len());
            let estimates = a
                .detectors()
                .iter()
                .map(|det| {
                    let dist = self
                        .devices
                        .iter()
                        .position(|d| d.node_id() == det.target)
                        .map_or(f64::NAN, |dev| self.channel.distance(dev + 1, ix));
                    det.estimate(dist)
                })
                .collect();
            AttackerReport {
                strategy: a.cfg.strategy.name().into(),
                started: a.started(),
                frames_sent: a.frames_sent,
                responses_seen: a.responses_seen,
                ranking: rank(estimates)
                    .into_iter()
                    .map(|e| ProbeRecord {
                        target: e.target,
                        time_to_ramping_s: e.time_to_ramping.map(|d| d.as_secs_f64()),
                        initial_rate_per_min: e.initial_rate_per_min.map(|n| n as u64),
                        first_response_s: e.first_response.map(secs),
                        distance_m: e.distance_m,
                    })
                    .collect(),
            }
        });
        let mut alert_counts = BTreeMap::new();
        for a in &self.alerts {
            *alert_counts.entry(a.kind.clone()).or_insert(0) += 1;
        }
        let records = self.log.records();
        let log = std::mem::replace(&mut self.log, EventLog::discard());
        let log_hash = log.finish()?;
        Ok(RunReport {
            scenario: self.scn.name.clone(),
            seed: self.scn.seed,
            duration_s: self.scn.duration.as_secs_f64(),
            ended_at_s: secs(t_end),
            stopped_early: self.stopped_at.is_some(),
            events: self.events,
            log_records: records,
            log_hash,
            devices,
            controller,
            attacker,
            alerts: self.alerts.clone(),
            alert_counts,
            stimuli: self.stimuli.clone(),
        })
    }
}

/// Validates and runs a scenario.
pub fn run(scn: &Scenario, opts: &RunOptions) -> Result<RunOutput, EngineError> {
    let problems = scenario::validate(scn);
    if !problems.is_empty() {
        return Err(EngineError::Invalid(problems));
    }
    World::new(scn, opts)?.run(opts)
}

/// Runs a scenario and writes its outputs under `dir`.
pub fn run_to_dir(scn: &Scenario, dir: &Path) -> Result<RunReport, EngineError> {
    run(scn, &RunOptions::to_dir(dir)).map(|o| o.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn short(name: &str) -> Scenario {
        let mut s = presets::find(name).unwrap().scenario();
        s.duration = Duration::from_secs(300);
        s
    }

    #[test]
    fn invalid_scenario_is_rejected_before_running() {
        let mut s = short("fig6_contact");
        s.devices.push(s.devices[0].clone());
        match run(&s, &RunOptions::default()) {
            Err(EngineError::Invalid(d)) => assert!(d[0].message.contains("duplicate node_id")),
            other => panic!("expected validation failure, got {other:?}"),
        }
    }

    #[test]
    fn files_do_not_change_the_run() {
        let s = short("fig6_contact");
        let dir = tempfile::tempdir().unwrap();
        let on_disk = run(&s, &RunOptions::to_dir(dir.path())).unwrap().report;
        let in_memory = run(&s, &RunOptions::in_memory()).unwrap().report;
        assert_eq!(on_disk, in_memory);
        for f in ["events.log", "metrics.csv", "report.json"] {
            assert!(dir.path().join(f).metadata().unwrap().len() > 0, "{f}");
        }
    }

    #[test]
    fn metrics_integrate_to_reported_energy() {
        let out = run(&short("fig6_contact"), &RunOptions::in_memory()).unwrap();
        let d = &out.report.devices[0];
        let mut prev = 0.0;
        let mut e = 0.0;
        for row in out.metrics.iter().filter(|r| r.node == "dev05") {
            e += row.avg_power_mw.unwrap() * (row.time_s - prev);
            prev = row.time_s;
        }
        assert!((e - d.energy_mj).abs() <= 1e-3 * d.energy_mj, "{e} vs {}", d.energy_mj);
        assert_eq!(prev, out.report.ended_at_s);
    }

    #[test]
    fn seed_moves_the_listening_phase() {
        let a = short("fig6_idle_motion");
        let mut b = a.clone();
        b.seed += 1;
        let ha = run(&a, &RunOptions::default()).unwrap().report.log_hash;
        let hb = run(&b, &RunOptions::default()).unwrap().report.log_hash;
        assert_ne!(ha, hb);
    }

    #[test]
    fn probe_stops_once_ranked() {
        let r = run(&presets::find("fig8_exp4").unwrap().scenario(), &RunOptions::default())
            .unwrap()
            .report;
        assert!(r.stopped_early);
        assert!(r.ended_at_s < r.duration_s);
    }
}
