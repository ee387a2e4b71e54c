//! Scenario files.
//!
//! Line-oriented text: `[section]` headers followed by `key = value` lines.
//! `#` starts a comment. Sections: `[scenario]` and `[controller]` once,
//! `[device]` one or more times, `[attacker]` at most once, `[stimulus]` and
//! `[output]` as needed. Durations take a unit suffix (`us`, `ms`, `s`,
//! `min`, `h`); node and home ids accept `0x` hex.
//!
//! ```text
//! [scenario]
//! name = fig6_contact
//! seed = 42
//! duration = 1h
//!
//! [controller]
//! home_id = 0xC0FFEE01
//!
//! [device]
//! node_id = 0x05
//! profile = contact
//! position = 10, 0
//!
//! [attacker]
//! strategy = drain_wakeup
//! target = 0x05
//! pps = 10
//! position = 50, 0
//! ```

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

use crate::attacker::{
    AttackStrategy, AttackerConfig, DEFAULT_INITIAL_BEAM, DEFAULT_KEEPALIVE_BEAM,
};
use crate::defense::{DefensePolicy, SpoofAction};
use crate::device::{
    ControllerConfig, DeviceClass, DeviceConfig, Profile, StimulusKind, CONTROLLER_ID,
};
use crate::sim::{LogMode, Position, SimTime};

#[derive(Debug, Clone, PartialEq)]
pub struct Stimulus {
    pub at: SimTime,
    pub target: u8,
    pub kind: StimulusKind,
    /// Repeat period; repeats stop at `until` or the end of the run.
    pub every: Option<Duration>,
    pub until: Option<SimTime>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub duration: Duration,
    pub sample_interval: Duration,
    pub log_mode: LogMode,
    pub controller: ControllerConfig,
    pub devices: Vec<DeviceConfig>,
    pub attacker: Option<AttackerConfig>,
    pub stimuli: Vec<Stimulus>,
    pub output_dir: Option<PathBuf>,
}

impl Scenario {
    pub fn device(&self, node: u8) -> Option<&DeviceConfig> {
        self.devices.iter().find(|d| d.node_id == node)
    }

    pub fn device_mut(&mut self, node: u8) -> Option<&mut DeviceConfig> {
        self.devices.iter_mut().find(|d| d.node_id == node)
    }

    /// Sensed stimuli expanded into individual instants, in time order.
    pub fn stimulus_times(&self) -> Vec<(SimTime, u8, StimulusKind)> {
        let end = SimTime::ZERO + self.duration;
        let mut all = Vec::new();
        for s in &self.stimuli {
            let mut t = s.at;
            let stop = s.until.unwrap_or(end).min(end);
            loop {
                if t > stop {
                    break;
                }
                all.push((t, s.target, s.kind));
                match s.every {
                    Some(p) if !p.is_zero() => t = t + p,
                    _ => break,
                }
            }
        }
        all.sort_by_key(|&(t, n, _)| (t, n));
        all
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

fn join(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("parse error: {}", join(.0))]
    Parse(Vec<Diagnostic>),
    #[error("invalid scenario: {}", join(.0))]
    Validation(Vec<Diagnostic>),
}

impl ScenarioError {
    pub fn diagnostics(&self) -> &[Diagnostic] {
        match self {
            ScenarioError::Parse(d) | ScenarioError::Validation(d) => d,
        }
    }
}

struct Section {
    name: String,
    line: usize,
    entries: BTreeMap<String, (usize, String)>,
}

impl Section {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }
}

fn parse_int<T: TryFrom<u64>>(s: &str) -> Result<T, String> {
    let s = s.trim();
    let v = if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(&hex.replace('_', ""), 16)
    } else {
        s.replace('_', "").parse::<u64>()
    }
    .map_err(|_| format!("`{s}` is not an integer"))?;
    T::try_from(v).map_err(|_| format!("`{s}` is out of range"))
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("`{}` is not a number", s.trim()))
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim() {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" | "off" => Ok(false),
        other => Err(format!("`{other}` is not a boolean")),
    }
}

pub fn parse_duration(s: &str) -> Result<Duration, String> {
    let s = s.trim();
    if s == "0" {
        return Ok(Duration::ZERO);
    }
    humantime::parse_duration(s).map_err(|e| format!("`{s}` is not a duration ({e})"))
}

pub fn format_duration(d: Duration) -> String {
    let us = d.as_micros();
    for (unit, size) in [("h", 3_600_000_000u128), ("min", 60_000_000), ("s", 1_000_000), ("ms", 1_000)] {
        if us != 0 && us % size == 0 {
            return format!("{}{unit}", us / size);
        }
    }
    format!("{us}us")
}

fn parse_position(s: &str) -> Result<Position, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("`{}` is not an `x, y` position", s.trim()));
    }
    Ok(Position::new(parse_f64(parts[0])?, parse_f64(parts[1])?))
}

fn parse_defenses(s: &str) -> Result<Vec<DefensePolicy>, String> {
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
        let mut words = item.split_whitespace();
        let name = words.next().unwrap_or_default();
        let arg = words.next().map(parse_duration).transpose()?;
        let policy = match name {
            "none" => continue,
            "meaningful_timeout" => DefensePolicy::MeaningfulPacketTimeout {
                max_awake_without_meaningful: arg
                    .unwrap_or(crate::defense::DEFAULT_MAX_AWAKE_WITHOUT_MEANINGFUL),
            },
            "spoof_alert" => DefensePolicy::SpoofDetection {
                action: SpoofAction::AlertUser,
            },
            "spoof_distrust" => DefensePolicy::SpoofDetection {
                action: SpoofAction::SuspiciousState {
                    distrust_duration: arg.unwrap_or(Duration::from_secs(60)),
                },
            },
            other => return Err(format!("unknown defense `{other}`")),
        };
        out.push(policy);
    }
    Ok(out)
}

fn format_defenses(policies: &[DefensePolicy]) -> String {
    if policies.is_empty() {
        return "none".into();
    }
    policies
        .iter()
        .map(|p| match p {
            DefensePolicy::MeaningfulPacketTimeout {
                max_awake_without_meaningful,
            } => format!("meaningful_timeout {}", format_duration(*max_awake_without_meaningful)),
            DefensePolicy::SpoofDetection {
                action: SpoofAction::AlertUser,
            } => "spoof_alert".into(),
            DefensePolicy::SpoofDetection {
                action: SpoofAction::SuspiciousState { distrust_duration },
            } => format!("spoof_distrust {}", format_duration(*distrust_duration)),
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn parse_node_list(s: &str) -> Result<Vec<u8>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(parse_int::<u8>)
        .collect()
}

fn parse_stimulus_kind(s: &str) -> Result<StimulusKind, String> {
    match s.trim() {
        "door_open" => Ok(StimulusKind::DoorOpen),
        "motion" => Ok(StimulusKind::Motion),
        "command" => Ok(StimulusKind::Command),
        "queue" => Ok(StimulusKind::Queue),
        other => Err(format!("unknown stimulus kind `{other}`")),
    }
}

/// Collects parse errors so one pass reports all of them.
struct Reader {
    errors: Vec<Diagnostic>,
}

impl Reader {
    fn get<T>(
        &mut self,
        sec: &mut Section,
        key: &str,
        parse: impl FnOnce(&str) -> Result<T, String>,
    ) -> Option<T> {
        let (line, raw) = sec.take(key)?;
        match parse(&raw) {
            Ok(v) => Some(v),
            Err(message) => {
                self.errors.push(Diagnostic {
                    line: Some(line),
                    message: format!("{key}: {message}"),
                });
                None
            }
        }
    }

    fn set<T>(
        &mut self,
        sec: &mut Section,
        key: &str,
        slot: &mut T,
        parse: impl FnOnce(&str) -> Result<T, String>,
    ) {
        if let Some(v) = self.get(sec, key, parse) {
            *slot = v;
        }
    }

    fn leftovers(&mut self, sec: Section) {
        for (key, (line, _)) in sec.entries {
            self.errors.push(Diagnostic {
                line: Some(line),
                message: format!("unknown key `{key}` in [{}]", sec.name),
            });
        }
    }
}

fn split_sections(text: &str) -> Result<Vec<Section>, Vec<Diagnostic>> {
    let mut sections: Vec<Section> = Vec::new();
    let mut errors = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(name) = body.strip_prefix('[').and_then(|b| b.strip_suffix(']')) {
            sections.push(Section {
                name: name.trim().to_string(),
                line,
                entries: BTreeMap::new(),
            });
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            errors.push(Diagnostic {
                line: Some(line),
                message: format!("expected `key = value`, found `{body}`"),
            });
            continue;
        };
        let Some(sec) = sections.last_mut() else {
            errors.push(Diagnostic {
                line: Some(line),
                message: "entry outside any section".into(),
            });
            continue;
        };
        let key = k.trim().to_string();
        if let Some((first, _)) = sec.entries.get(&key) {
            errors.push(Diagnostic {
                line: Some(line),
                message: format!("`{key}` already set on line {first}"),
            });
            continue;
        }
        sec.entries.insert(key, (line, v.trim().to_string()));
    }
    if errors.is_empty() {
        Ok(sections)
    } else {
        Err(errors)
    }
}

struct Located<T> {
    line: usize,
    value: T,
}

pub fn load_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let sections = split_sections(text).map_err(ScenarioError::Parse)?;
    let mut r = Reader { errors: Vec::new() };

    let mut scenario_sec = None;
    let mut controllers = Vec::new();
    let mut devices = Vec::new();
    let mut attackers = Vec::new();
    let mut stimuli = Vec::new();
    let mut output_dir = None;

    for mut sec in sections {
        match sec.name.as_str() {
            "scenario" => {
                if scenario_sec.is_some() {
                    r.errors.push(Diagnostic {
                        line: Some(sec.line),
                        message: "duplicate [scenario] section".into(),
                    });
                }
                scenario_sec = Some(sec);
            }
            "controller" => {
                let home = r.get(&mut sec, "home_id", parse_int::<u32>).unwrap_or(0xC0FF_EE01);
                let mut c = ControllerConfig::new(home);
                r.set(&mut sec, "position", &mut c.position, parse_position);
                r.set(&mut sec, "range", &mut c.range_m, parse_f64);
                r.set(&mut sec, "dos_threshold", &mut c.dos_threshold_pps, parse_int::<u32>);
                r.set(&mut sec, "dos_cooldown", &mut c.dos_cooldown, parse_duration);
                r.set(&mut sec, "defense", &mut c.defenses, parse_defenses);
                controllers.push(Located {
                    line: sec.line,
                    value: c,
                });
                r.leftovers(sec);
            }
            "device" => {
                devices.push((sec.line, read_device(&mut r, &mut sec)));
                r.leftovers(sec);
            }
            "attacker" => {
                if let Some(a) = read_attacker(&mut r, &mut sec) {
                    attackers.push(Located {
                        line: sec.line,
                        value: a,
                    });
                }
                r.leftovers(sec);
            }
            "stimulus" => {
                let at = r.get(&mut sec, "at", parse_duration);
                let target = r.get(&mut sec, "target", parse_int::<u8>);
                let kind = r.get(&mut sec, "kind", parse_stimulus_kind);
                let every = r.get(&mut sec, "every", parse_duration);
                let until = r.get(&mut sec, "until", parse_duration);
                match (at, target, kind) {
                    (Some(at), Some(target), Some(kind)) => stimuli.push(Located {
                        line: sec.line,
                        value: Stimulus {
                            at: SimTime::ZERO + at,
                            target,
                            kind,
                            every,
                            until: until.map(|u| SimTime::ZERO + u),
                        },
                    }),
                    _ => r.errors.push(Diagnostic {
                        line: Some(sec.line),
                        message: "[stimulus] needs at, target and kind".into(),
                    }),
                }
                r.leftovers(sec);
            }
            "output" => {
                output_dir = r.get(&mut sec, "dir", |s| Ok(PathBuf::from(s)));
                r.leftovers(sec);
            }
            other => r.errors.push(Diagnostic {
                line: Some(sec.line),
                message: format!("unknown section [{other}]"),
            }),
        }
    }

    let mut name = String::from("scenario");
    let mut seed = None;
    let mut duration = None;
    let mut sample_interval = Duration::from_secs(1);
    let mut log_mode = LogMode::Summary;
    match scenario_sec {
        Some(mut sec) => {
            r.set(&mut sec, "name", &mut name, |s| Ok(s.to_string()));
            seed = r.get(&mut sec, "seed", parse_int::<u64>);
            duration = r.get(&mut sec, "duration", parse_duration);
            r.set(&mut sec, "sample_interval", &mut sample_interval, parse_duration);
            r.set(&mut sec, "log", &mut log_mode, |s| match s {
                "summary" => Ok(LogMode::Summary),
                "full" => Ok(LogMode::Full),
                other => Err(format!("unknown log mode `{other}`")),
            });
            if seed.is_none() && !r.errors.iter().any(|d| d.message.starts_with("seed")) {
                r.errors.push(Diagnostic {
                    line: Some(sec.line),
                    message: "seed is mandatory".into(),
                });
            }
            if duration.is_none() && !r.errors.iter().any(|d| d.message.starts_with("duration")) {
                r.errors.push(Diagnostic {
                    line: Some(sec.line),
                    message: "duration is mandatory".into(),
                });
            }
            r.leftovers(sec);
        }
        None => r.errors.push(Diagnostic {
            line: None,
            message: "missing [scenario] section".into(),
        }),
    }

    if !r.errors.is_empty() {
        return Err(ScenarioError::Parse(r.errors));
    }

    let mut v = Vec::new();
    if controllers.is_empty() {
        v.push(Diagnostic {
            line: None,
            message: "missing [controller] section".into(),
        });
    }
    for extra in controllers.iter().skip(1) {
        v.push(Diagnostic {
            line: Some(extra.line),
            message: format!(
                "exactly one controller allowed; first defined on line {}",
                controllers[0].line
            ),
        });
    }
    let controller = controllers
        .into_iter()
        .next()
        .map(|c| c.value)
        .unwrap_or_else(|| ControllerConfig::new(0));

    let devices: Vec<(usize, DeviceConfig)> = devices
        .into_iter()
        .map(|(line, d)| {
            let mut d = d;
            if d.home_id == 0 {
                d.home_id = controller.home_id;
            }
            (line, d)
        })
        .collect();
    let scenario = Scenario {
        name,
        seed: seed.unwrap_or(0),
        duration: duration.unwrap_or_default(),
        sample_interval,
        log_mode,
        controller,
        devices: devices.iter().map(|(_, d)| d.clone()).collect(),
        attacker: attackers.first().map(|a| a.value.clone()),
        stimuli: stimuli.iter().map(|s| s.value.clone()).collect(),
        output_dir,
    };

    for extra in attackers.iter().skip(1) {
        v.push(Diagnostic {
            line: Some(extra.line),
            message: "at most one [attacker] section".into(),
        });
    }
    let device_lines: Vec<usize> = devices.iter().map(|(l, _)| *l).collect();
    let attacker_line = attackers.first().map(|a| a.line);
    let stimulus_lines: Vec<usize> = stimuli.iter().map(|s| s.line).collect();
    v.extend(validate_with_lines(
        &scenario,
        &device_lines,
        attacker_line,
        &stimulus_lines,
    ));
    if v.is_empty() {
        Ok(scenario)
    } else {
        Err(ScenarioError::Validation(v))
    }
}

fn read_device(r: &mut Reader, sec: &mut Section) -> DeviceConfig {
    let node_id = r.get(sec, "node_id", parse_int::<u8>).unwrap_or(0);
    let profile = r
        .get(sec, "profile", |s| match s {
            "contact" => Ok(Profile::Contact),
            "motion" => Ok(Profile::Motion),
            other => Err(format!("unknown profile `{other}`")),
        })
        .unwrap_or(Profile::Contact);
    let mut d = DeviceConfig::for_profile(profile, node_id, 0);
    if node_id == 0 && !r.errors.iter().any(|e| e.message.starts_with("node_id")) {
        r.errors.push(Diagnostic {
            line: Some(sec.line),
            message: "[device] needs node_id".into(),
        });
    }
    r.set(sec, "home_id", &mut d.home_id, parse_int::<u32>);
    if let Some(class) = r.get(sec, "class", |s| match s {
        "wakeup_interval" | "flirs" | "manual" => Ok(s.to_string()),
        other => Err(format!("unknown class `{other}`")),
    }) {
        d.class = match class.as_str() {
            "flirs" => match d.class {
                c @ DeviceClass::Flirs { .. } => c,
                _ => DeviceConfig::motion(0, 0).class,
            },
            "wakeup_interval" => match d.class {
                c @ DeviceClass::WakeupInterval { .. } => c,
                _ => DeviceConfig::contact(0, 0).class,
            },
            _ => DeviceClass::ManualWakeup,
        };
    }
    match &mut d.class {
        DeviceClass::Flirs {
            light_sleep_period,
            light_sleep_window,
        } => {
            r.set(sec, "light_sleep_period", light_sleep_period, parse_duration);
            r.set(sec, "light_sleep_window", light_sleep_window, parse_duration);
        }
        DeviceClass::WakeupInterval {
            wakeup_interval,
            heartbeat_interval,
        } => {
            r.set(sec, "wakeup_interval", wakeup_interval, parse_duration);
            r.set(sec, "heartbeat_interval", heartbeat_interval, parse_duration);
        }
        _ => {}
    }
    r.set(sec, "position", &mut d.position, parse_position);
    r.set(sec, "range", &mut d.range_m, parse_f64);
    r.set(sec, "soc", &mut d.soc, parse_f64);
    r.set(sec, "capacity_mah", &mut d.capacity_mah, parse_f64);
    r.set(sec, "sleep_power_mw", &mut d.sleep_power_mw, parse_f64);
    r.set(sec, "awake_power_mw", &mut d.awake_power_mw, parse_f64);
    r.set(sec, "rx_power_multiplier", &mut d.rx_power_multiplier, parse_f64);
    r.set(sec, "awake_idle_timeout", &mut d.awake_idle_timeout, parse_duration);
    r.set(sec, "heartbeat_window", &mut d.heartbeat_window, parse_duration);
    r.set(sec, "wakeup_window", &mut d.wakeup_window, parse_duration);
    if let Some(p) = r.get(sec, "heartbeat_phase", parse_duration) {
        d.heartbeat_phase = Some(p);
    }
    if let Some(p) = r.get(sec, "light_sleep_phase", parse_duration) {
        d.light_sleep_phase = Some(p);
    }
    r.set(sec, "overload_threshold", &mut d.overload_threshold, parse_int::<u32>);
    r.set(sec, "defense", &mut d.defenses, parse_defenses);
    d
}

fn read_attacker(r: &mut Reader, sec: &mut Section) -> Option<AttackerConfig> {
    let strategy = r.get(sec, "strategy", |s| Ok(s.to_string()));
    let target = r.get(sec, "target", parse_int::<u8>);
    let targets = r.get(sec, "targets", parse_node_list);
    let pps = r.get(sec, "pps", parse_int::<u32>);
    let initial_beam = r.get(sec, "initial_beam", parse_duration);
    let keepalive_beam = r.get(sec, "keepalive_beam", parse_duration);
    let keepalive_every = r.get(sec, "keepalive_every", parse_int::<u32>);
    let foreign_home_id = r.get(sec, "foreign_home_id", parse_int::<u32>);
    let spoof_source = r.get(sec, "spoof_source", parse_int::<u8>);
    let drop_fraction = r.get(sec, "drop_fraction", parse_f64);
    let beams = r.get(sec, "beams", parse_bool);

    let need_target = |r: &mut Reader| {
        if target.is_none() {
            r.errors.push(Diagnostic {
                line: Some(sec.line),
                message: "attack strategy needs a target".into(),
            });
        }
        target.unwrap_or(0)
    };
    let strategy = match strategy.as_deref() {
        Some("drain_flirs") => AttackStrategy::DrainFlirs {
            target: need_target(r),
            pps: pps.unwrap_or(10),
            initial_beam: initial_beam.unwrap_or(DEFAULT_INITIAL_BEAM),
            keepalive_beam: keepalive_beam.unwrap_or(DEFAULT_KEEPALIVE_BEAM),
        },
        Some("drain_wakeup") => AttackStrategy::DrainWakeupInterval {
            target: need_target(r),
            pps: pps.unwrap_or(10),
        },
        Some("dos_controller") => AttackStrategy::DosController {
            pps: pps.unwrap_or(50),
            foreign_home_id,
            spoof_source,
        },
        Some("dos_motion") => AttackStrategy::DosMotionSensor {
            target: need_target(r),
            msg_rate: pps.unwrap_or(80),
            initial_beam: initial_beam.unwrap_or(DEFAULT_INITIAL_BEAM),
            keepalive_beam: keepalive_beam.unwrap_or(DEFAULT_KEEPALIVE_BEAM),
            keepalive_every: keepalive_every.unwrap_or(8),
        },
        Some("probe") => AttackStrategy::WeakestLinkProbe {
            targets: targets.unwrap_or_default(),
            pps: pps.unwrap_or(10),
            drop_fraction: drop_fraction.unwrap_or(0.5),
            beams: beams.unwrap_or(false).then(|| {
                (
                    initial_beam.unwrap_or(DEFAULT_INITIAL_BEAM),
                    keepalive_beam.unwrap_or(DEFAULT_KEEPALIVE_BEAM),
                )
            }),
        },
        Some(other) => {
            r.errors.push(Diagnostic {
                line: Some(sec.line),
                message: format!("unknown strategy `{other}`"),
            });
            return None;
        }
        None => {
            r.errors.push(Diagnostic {
                line: Some(sec.line),
                message: "[attacker] needs a strategy".into(),
            });
            return None;
        }
    };
    let mut a = AttackerConfig::new(strategy);
    r.set(sec, "position", &mut a.position, parse_position);
    r.set(sec, "range", &mut a.range_m, parse_f64);
    if let Some(s) = r.get(sec, "start", parse_duration) {
        a.start = SimTime::ZERO + s;
    }
    if let Some(s) = r.get(sec, "stop", parse_duration) {
        a.stop = Some(SimTime::ZERO + s);
    }
    if let Some(h) = r.get(sec, "home_id", parse_int::<u32>) {
        a.home_id = Some(h);
    }
    r.set(sec, "stop_when_ranked", &mut a.stop_when_ranked, parse_bool);
    Some(a)
}

/// Semantic checks on an assembled scenario.
pub fn validate(s: &Scenario) -> Vec<Diagnostic> {
    validate_with_lines(s, &[], None, &[])
}

fn validate_with_lines(
    s: &Scenario,
    device_lines: &[usize],
    attacker_line: Option<usize>,
    stimulus_lines: &[usize],
) -> Vec<Diagnostic> {
    let mut v = Vec::new();
    let dline = |i: usize| device_lines.get(i).copied();
    if s.duration.is_zero() {
        v.push(Diagnostic {
            line: None,
            message: "duration must be positive".into(),
        });
    }
    if s.sample_interval.is_zero() {
        v.push(Diagnostic {
            line: None,
            message: "sample_interval must be positive".into(),
        });
    }
    if s.devices.is_empty() {
        v.push(Diagnostic {
            line: None,
            message: "no [device] sections".into(),
        });
    }
    let mut seen: BTreeMap<u8, usize> = BTreeMap::new();
    for (i, d) in s.devices.iter().enumerate() {
        let at = dline(i);
        let mut err = |message: String| v.push(Diagnostic { line: at, message });
        if let Some(&j) = seen.get(&d.node_id) {
            match (dline(j), at) {
                (Some(a), Some(b)) => err(format!(
                    "duplicate node_id {:#04x} on lines {a} and {b}",
                    d.node_id
                )),
                _ => err(format!("duplicate node_id {:#04x}", d.node_id)),
            }
        } else {
            seen.insert(d.node_id, i);
        }
        if d.node_id == CONTROLLER_ID || d.node_id == 0 || d.node_id == 0xFF {
            err(format!("node_id {:#04x} is reserved", d.node_id));
        }
        if !(0.0..=1.0).contains(&d.soc) {
            err(format!("soc {} must be within 0..=1", d.soc));
        }
        if d.capacity_mah <= 0.0 {
            err("capacity_mah must be positive".into());
        }
        if d.sleep_power_mw < 0.0 || d.awake_power_mw < 0.0 || d.rx_power_multiplier <= 0.0 {
            err("power figures must be non-negative".into());
        }
        if d.range_m < 0.0 {
            err("range must be non-negative".into());
        }
        if d.awake_idle_timeout.is_zero() {
            err("awake_idle_timeout must be positive".into());
        }
        match d.class {
            DeviceClass::Flirs {
                light_sleep_period,
                light_sleep_window,
            } => {
                if light_sleep_window.is_zero() || light_sleep_window >= light_sleep_period {
                    err("light_sleep_window must be positive and shorter than light_sleep_period".into());
                }
            }
            DeviceClass::WakeupInterval {
                wakeup_interval,
                heartbeat_interval,
            } => {
                if wakeup_interval.is_zero() || heartbeat_interval.is_zero() {
                    err("wakeup and heartbeat intervals must be positive".into());
                }
            }
            _ => {}
        }
        for p in &d.defenses {
            match p {
                DefensePolicy::MeaningfulPacketTimeout {
                    max_awake_without_meaningful,
                } if *max_awake_without_meaningful <= d.awake_idle_timeout => {
                    err("meaningful_timeout must exceed awake_idle_timeout".into());
                }
                DefensePolicy::SpoofDetection {
                    action: SpoofAction::SuspiciousState { distrust_duration },
                } if distrust_duration.is_zero() => {
                    err("distrust duration must be positive".into());
                }
                _ => {}
            }
        }
    }
    if s.controller.dos_threshold_pps == 0 {
        v.push(Diagnostic {
            line: None,
            message: "dos_threshold must be positive".into(),
        });
    }
    if let Some(a) = &s.attacker {
        if let Err(e) = a.strategy.validate() {
            v.push(Diagnostic {
                line: attacker_line,
                message: e.to_string(),
            });
        }
        for t in a.strategy.targets() {
            if t != CONTROLLER_ID && s.device(t).is_none() {
                v.push(Diagnostic {
                    line: attacker_line,
                    message: format!("attack target {t:#04x} is not a device"),
                });
            }
        }
    }
    for (i, st) in s.stimuli.iter().enumerate() {
        if s.device(st.target).is_none() {
            v.push(Diagnostic {
                line: stimulus_lines.get(i).copied(),
                message: format!("stimulus target {:#04x} is not a device", st.target),
            });
        }
    }
    v
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut o = String::new();
        let pos = |p: Position| format!("{}, {}", p.x, p.y);
        let d = format_duration;
        let _ = writeln!(o, "[scenario]");
        let _ = writeln!(o, "name = {}", self.name);
        let _ = writeln!(o, "seed = {}", self.seed);
        let _ = writeln!(o, "duration = {}", d(self.duration));
        let _ = writeln!(o, "sample_interval = {}", d(self.sample_interval));
        let _ = writeln!(
            o,
            "log = {}",
            match self.log_mode {
                LogMode::Summary => "summary",
                LogMode::Full => "full",
            }
        );
        let c = &self.controller;
        let _ = writeln!(o, "\n[controller]");
        let _ = writeln!(o, "home_id = {:#010X}", c.home_id);
        let _ = writeln!(o, "position = {}", pos(c.position));
        let _ = writeln!(o, "range = {}", c.range_m);
        let _ = writeln!(o, "dos_threshold = {}", c.dos_threshold_pps);
        let _ = writeln!(o, "dos_cooldown = {}", d(c.dos_cooldown));
        let _ = writeln!(o, "defense = {}", format_defenses(&c.defenses));
        for dev in &self.devices {
            let _ = writeln!(o, "\n[device]");
            let _ = writeln!(o, "node_id = {:#04x}", dev.node_id);
            let _ = writeln!(o, "profile = {}", dev.profile.name());
            let _ = writeln!(o, "home_id = {:#010X}", dev.home_id);
            let _ = writeln!(o, "class = {}", dev.class.name());
            match dev.class {
                DeviceClass::Flirs {
                    light_sleep_period,
                    light_sleep_window,
                } => {
                    let _ = writeln!(o, "light_sleep_period = {}", d(light_sleep_period));
                    let _ = writeln!(o, "light_sleep_window = {}", d(light_sleep_window));
                }
                DeviceClass::WakeupInterval {
                    wakeup_interval,
                    heartbeat_interval,
                } => {
                    let _ = writeln!(o, "wakeup_interval = {}", d(wakeup_interval));
                    let _ = writeln!(o, "heartbeat_interval = {}", d(heartbeat_interval));
                }
                _ => {}
            }
            let _ = writeln!(o, "position = {}", pos(dev.position));
            let _ = writeln!(o, "range = {}", dev.range_m);
            let _ = writeln!(o, "soc = {}", dev.soc);
            let _ = writeln!(o, "capacity_mah = {}", dev.capacity_mah);
            let _ = writeln!(o, "sleep_power_mw = {}", dev.sleep_power_mw);
            let _ = writeln!(o, "awake_power_mw = {}", dev.awake_power_mw);
            let _ = writeln!(o, "rx_power_multiplier = {}", dev.rx_power_multiplier);
            let _ = writeln!(o, "awake_idle_timeout = {}", d(dev.awake_idle_timeout));
            let _ = writeln!(o, "heartbeat_window = {}", d(dev.heartbeat_window));
            let _ = writeln!(o, "wakeup_window = {}", d(dev.wakeup_window));
            if let Some(p) = dev.heartbeat_phase {
                let _ = writeln!(o, "heartbeat_phase = {}", d(p));
            }
            if let Some(p) = dev.light_sleep_phase {
                let _ = writeln!(o, "light_sleep_phase = {}", d(p));
            }
            let _ = writeln!(o, "overload_threshold = {}", dev.overload_threshold);
            let _ = writeln!(o, "defense = {}", format_defenses(&dev.defenses));
        }
        if let Some(a) = &self.attacker {
            let _ = writeln!(o, "\n[attacker]");
            let _ = writeln!(o, "strategy = {}", a.strategy.name());
            match &a.strategy {
                AttackStrategy::DrainFlirs {
                    target,
                    pps,
                    initial_beam,
                    keepalive_beam,
                } => {
                    let _ = writeln!(o, "target = {target:#04x}\npps = {pps}");
                    let _ = writeln!(o, "initial_beam = {}", d(*initial_beam));
                    let _ = writeln!(o, "keepalive_beam = {}", d(*keepalive_beam));
                }
                AttackStrategy::DrainWakeupInterval { target, pps } => {
                    let _ = writeln!(o, "target = {target:#04x}\npps = {pps}");
                }
                AttackStrategy::DosController {
                    pps,
                    foreign_home_id,
                    spoof_source,
                } => {
                    let _ = writeln!(o, "pps = {pps}");
                    if let Some(h) = foreign_home_id {
                        let _ = writeln!(o, "foreign_home_id = {h:#010X}");
                    }
                    if let Some(s) = spoof_source {
                        let _ = writeln!(o, "spoof_source = {s:#04x}");
                    }
                }
                AttackStrategy::DosMotionSensor {
                    target,
                    msg_rate,
                    initial_beam,
                    keepalive_beam,
                    keepalive_every,
                } => {
                    let _ = writeln!(o, "target = {target:#04x}\npps = {msg_rate}");
                    let _ = writeln!(o, "initial_beam = {}", d(*initial_beam));
                    let _ = writeln!(o, "keepalive_beam = {}", d(*keepalive_beam));
                    let _ = writeln!(o, "keepalive_every = {keepalive_every}");
                }
                AttackStrategy::WeakestLinkProbe {
                    targets,
                    pps,
                    drop_fraction,
                    beams,
                } => {
                    let list: Vec<String> = targets.iter().map(|t| format!("{t:#04x}")).collect();
                    let _ = writeln!(o, "targets = {}\npps = {pps}", list.join(", "));
                    let _ = writeln!(o, "drop_fraction = {drop_fraction}");
                    let _ = writeln!(o, "beams = {}", beams.is_some());
                    if let Some((i, k)) = beams {
                        let _ = writeln!(o, "initial_beam = {}", d(*i));
                        let _ = writeln!(o, "keepalive_beam = {}", d(*k));
                    }
                }
            }
            let _ = writeln!(o, "position = {}", pos(a.position));
            let _ = writeln!(o, "range = {}", a.range_m);
            let _ = writeln!(o, "start = {}", d(a.start - SimTime::ZERO));
            if let Some(s) = a.stop {
                let _ = writeln!(o, "stop = {}", d(s - SimTime::ZERO));
            }
            if let Some(h) = a.home_id {
                let _ = writeln!(o, "home_id = {h:#010X}");
            }
            let _ = writeln!(o, "stop_when_ranked = {}", a.stop_when_ranked);
        }
        for s in &self.stimuli {
            let _ = writeln!(o, "\n[stimulus]");
            let _ = writeln!(o, "at = {}", d(s.at - SimTime::ZERO));
            let _ = writeln!(o, "target = {:#04x}", s.target);
            let _ = writeln!(o, "kind = {}", s.kind.name());
            if let Some(e) = s.every {
                let _ = writeln!(o, "every = {}", d(e));
            }
            if let Some(u) = s.until {
                let _ = writeln!(o, "until = {}", d(u - SimTime::ZERO));
            }
        }
        if let Some(dir) = &self.output_dir {
            let _ = writeln!(o, "\n[output]\ndir = {}", dir.display());
        }
        f.write_str(&o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = "\
[scenario]
name = t
seed = 7
duration = 1h

[controller]
home_id = 0xC0FFEE01

[device]
node_id = 0x05
profile = contact
position = 10, 0
";

    #[test]
    fn minimal_scenario_loads_with_profile_defaults() {
        let s = load_scenario(BASIC).unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.duration, Duration::from_secs(3600));
        let d = &s.devices[0];
        assert_eq!(d.home_id, 0xC0FF_EE01);
        assert_eq!(d.capacity_mah, 470.0);
        assert_eq!(d.awake_power_mw, 35.0);
        assert_eq!(d.awake_idle_timeout, Duration::from_millis(350));
    }

    #[test]
    fn empty_device_list_is_rejected() {
        let text = "[scenario]\nseed = 1\nduration = 1s\n[controller]\n";
        let err = load_scenario(text).unwrap_err();
        assert!(matches!(err, ScenarioError::Validation(_)));
        assert!(err.to_string().contains("no [device]"));
    }

    #[test]
    fn duplicate_ids_name_both_lines() {
        let text = format!("{BASIC}\n[device]\nnode_id = 5\n");
        let err = load_scenario(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lines 9 and 14"), "{msg}");
    }

    #[test]
    fn missing_controller_and_seed() {
        let err = load_scenario("[scenario]\nduration = 1s\n[device]\nnode_id=5\n").unwrap_err();
        assert!(err.to_string().contains("seed is mandatory"));
        let err = load_scenario("[scenario]\nseed=1\nduration = 1s\n[device]\nnode_id=5\n").unwrap_err();
        assert!(err.to_string().contains("missing [controller]"));
    }

    #[test]
    fn negative_soc_rejected_with_line() {
        let text = BASIC.replace("position = 10, 0", "position = 10, 0\nsoc = -0.1");
        let err = load_scenario(&text).unwrap_err();
        assert_eq!(err.diagnostics()[0].line, Some(9));
        assert!(err.to_string().contains("soc"));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = BASIC.replace("duration = 1h", "duration = forever\nbogus line");
        let err = load_scenario(&text).unwrap_err();
        assert!(matches!(err, ScenarioError::Parse(_)));
        assert_eq!(err.diagnostics()[0].line, Some(5));
    }

    #[test]
    fn unknown_keys_and_targets() {
        let text = format!("{BASIC}colour = red\n");
        assert!(load_scenario(&text).unwrap_err().to_string().contains("unknown key `colour`"));
        let text = format!("{BASIC}\n[attacker]\nstrategy = drain_wakeup\ntarget = 0x09\n");
        assert!(load_scenario(&text).unwrap_err().to_string().contains("0x09"));
    }

    #[test]
    fn durations() {
        assert_eq!(parse_duration("1160ms").unwrap(), Duration::from_millis(1160));
        assert_eq!(parse_duration("71min").unwrap(), Duration::from_secs(4260));
        assert_eq!(parse_duration("12h").unwrap(), Duration::from_secs(43200));
        assert_eq!(parse_duration("500us").unwrap(), Duration::from_micros(500));
        for d in [1160u64, 4_260_000, 43_200_000, 1, 1500] {
            let d = Duration::from_millis(d);
            assert_eq!(parse_duration(&format_duration(d)).unwrap(), d);
        }
        assert_eq!(format_duration(Duration::from_secs(4260)), "71min");
    }

    #[test]
    fn defenses_parse() {
        let p = parse_defenses("meaningful_timeout 3s, spoof_distrust 30s").unwrap();
        assert_eq!(p.len(), 2);
        assert!(parse_defenses("firewall").is_err());
        assert!(parse_defenses("none").unwrap().is_empty());
    }

    #[test]
    fn periodic_stimuli_expand() {
        let text = format!(
            "{BASIC}\n[stimulus]\nat = 10s\ntarget = 5\nkind = door_open\nevery = 20min\n"
        );
        let s = load_scenario(&text).unwrap();
        let times = s.stimulus_times();
        assert_eq!(times.len(), 3);
        assert_eq!(times[2].0, SimTime::from_secs(2410));
    }

    #[test]
    fn display_round_trips() {
        let text = format!(
            "{BASIC}\n[attacker]\nstrategy = probe\ntargets = 5\nbeams = true\nstop = 2h\n\n[stimulus]\nat = 1s\ntarget = 5\nkind = queue\n\n[output]\ndir = out/x\n"
        );
        let s = load_scenario(&text).unwrap();
        let again = load_scenario(&s.to_string()).unwrap();
        assert_eq!(s, again);
    }
}
