//! Run results: the JSON report, metrics rows and a plain-text summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub duration_s: f64,
    /// Where the run actually ended; earlier than `duration_s` when a probe finished.
    pub ended_at_s: f64,
    pub stopped_early: bool,
    pub events: u64,
    pub log_records: u64,
    pub log_hash: String,
    pub devices: Vec<DeviceReport>,
    pub controller: ControllerReport,
    pub attacker: Option<AttackerReport>,
    pub alerts: Vec<AlertRecord>,
    pub alert_counts: BTreeMap<String, u64>,
    pub stimuli: Vec<StimulusRecord>,
}

impl RunReport {
    pub fn device(&self, node: u8) -> Option<&DeviceReport> {
        self.devices.iter().find(|d| d.node_id == node)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupplyRecord {
    pub time_s: f64,
    pub kind: String,
    pub voltage_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub node_id: u8,
    pub profile: String,
    pub class: String,
    pub distance_to_attacker_m: Option<f64>,
    pub soc_initial: f64,
    pub soc_final: f64,
    pub voltage_final_v: f64,
    pub energy_mj: f64,
    pub avg_power_mw: f64,
    pub sleep_power_mw: f64,
    pub awake_power_mw: f64,
    pub first_response_s: Option<f64>,
    pub energy_at_first_response_mj: Option<f64>,
    /// Average draw from the first response to death or the end of the run.
    pub attack_avg_power_mw: Option<f64>,
    /// `attack_avg_power_mw` over the sleep draw.
    pub amplification: Option<f64>,
    /// First supply cut-out.
    pub ramping_onset_s: Option<f64>,
    /// Start of the first outage lasting five minutes or more.
    pub death_s: Option<f64>,
    /// Death minus first response.
    pub drain_time_s: Option<f64>,
    /// Share of the drain time spent before ramping began.
    pub onset_fraction: Option<f64>,
    pub shutdowns: u64,
    pub reboots: u64,
    pub supply_events: Vec<SupplyRecord>,
    pub responses: u64,
    /// Nonce reports the attacker overheard in the minute after the first one.
    pub sniffed_reports_first_minute: Option<u64>,
    pub awake_episodes: u64,
    pub max_awake_episode_s: f64,
    pub forced_sleeps: u64,
    pub reports: u64,
    pub suppressed: u64,
    pub alerts_raised: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerReport {
    pub alarms: u64,
    pub suppressed_alarms: u64,
    pub alerts_received: u64,
    pub dos_episodes: u64,
    pub denied_s: f64,
    pub alerts_raised: u64,
    pub final_state: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub target: u8,
    pub time_to_ramping_s: Option<f64>,
    pub initial_rate_per_min: Option<u64>,
    pub first_response_s: Option<f64>,
    pub distance_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackerReport {
    pub strategy: String,
    pub started: bool,
    pub frames_sent: u64,
    pub responses_seen: u64,
    /// Probe targets, weakest first.
    pub ranking: Vec<ProbeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub time_s: f64,
    pub node: u8,
    pub kind: String,
}

/// What became of one stimulus: `report`, `suppressed_below_cutoff`,
/// `suppressed_overloaded`, `sent`, `queued` or `dropped`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusRecord {
    pub time_s: f64,
    pub node: u8,
    pub kind: String,
    pub outcome: String,
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub time_s: f64,
    pub node: String,
    pub role: String,
    pub avg_power_mw: Option<f64>,
    pub voltage_v: Option<f64>,
    pub state: String,
    pub responses_last_min: Option<u64>,
}

fn hours(s: f64) -> String {
    if s >= 3600.0 {
        format!("{:.2} h", s / 3600.0)
    } else if s >= 60.0 {
        format!("{:.1} min", s / 60.0)
    } else {
        format!("{s:.2} s")
    }
}

fn opt(v: Option<f64>, f: impl Fn(f64) -> String) -> String {
    v.map(f).unwrap_or_else(|| "-".into())
}

/// A reference figure and whether this run landed within its tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub label: String,
    pub measured: String,
    pub reference: &'static str,
    pub matched: bool,
}

/// Reference figures that apply to this run.
pub fn anchors(r: &RunReport) -> Vec<Anchor> {
    let mut out = Vec::new();
    for d in &r.devices {
        let tag = format!("{:#04x}", d.node_id);
        if d.first_response_s.is_some() {
            let peak = d.awake_power_mw / d.sleep_power_mw;
            let (reference, floor) = match d.profile.as_str() {
                "contact" => ("more than 1500x", 1500.0),
                _ => ("more than 51x", 51.0),
            };
            out.push(Anchor {
                label: format!("{tag} power amplification"),
                measured: format!("{peak:.0}x awake over sleep"),
                reference,
                matched: peak >= floor,
            });
        }
        if let Some(drain) = d.drain_time_s {
            if d.profile == "contact" && d.soc_initial >= 0.999 {
                let h = drain / 3600.0;
                out.push(Anchor {
                    label: format!("{tag} drain time"),
                    measured: format!("{h:.2} h"),
                    reference: "16 h +/- 20%",
                    matched: (12.8..=19.2).contains(&h),
                });
            }
        }
        if let Some(f) = d.onset_fraction {
            out.push(Anchor {
                label: format!("{tag} ramping onset"),
                measured: format!("{:.0}% of drain time", f * 100.0),
                reference: "about halfway, +/- 15%",
                matched: (0.35..=0.65).contains(&f),
            });
        }
        if let (Some(n), Some(_)) = (d.sniffed_reports_first_minute, d.ramping_onset_s) {
            if d.soc_initial >= 0.999 {
                out.push(Anchor {
                    label: format!("{tag} responses per minute"),
                    measured: n.to_string(),
                    reference: "around 550 +/- 15%",
                    matched: (467..=633).contains(&n),
                });
            }
        }
    }
    let sensed: Vec<&StimulusRecord> = r
        .stimuli
        .iter()
        .filter(|s| s.kind == "door_open" || s.kind == "motion")
        .collect();
    if r.attacker.as_ref().is_some_and(|a| a.strategy == "dos_controller") {
        out.push(Anchor {
            label: "suppressed alarms".into(),
            measured: r.controller.suppressed_alarms.to_string(),
            reference: "every alarm during a matching flood, none otherwise",
            matched: r.controller.dos_episodes == 0 || r.controller.suppressed_alarms > 0,
        });
    }
    if r.attacker.as_ref().is_some_and(|a| a.strategy == "dos_motion") && !sensed.is_empty() {
        let overloaded = sensed
            .iter()
            .filter(|s| s.outcome == "suppressed_overloaded")
            .count();
        out.push(Anchor {
            label: "motion sensing under flood".into(),
            measured: format!("{overloaded} of {} suppressed", sensed.len()),
            reference: "stops sensing at 80 messages per second",
            matched: true,
        });
    }
    out
}

/// Human-readable summary with reference figures next to the measured ones.
pub fn summarize(r: &RunReport) -> String {
    let mut o = String::new();
    let _ = writeln!(o, "scenario {} (seed {})", r.scenario, r.seed);
    let _ = writeln!(
        o,
        "simulated {} of {}{}; {} events, log hash {}",
        hours(r.ended_at_s),
        hours(r.duration_s),
        if r.stopped_early { " (stopped early)" } else { "" },
        r.events,
        &r.log_hash[..r.log_hash.len().min(16)]
    );
    for d in &r.devices {
        let _ = writeln!(o, "\ndevice {:#04x} {} ({})", d.node_id, d.profile, d.class);
        let _ = writeln!(
            o,
            "  energy {:.1} mJ, average {:.3} mW, soc {:.3} -> {:.3}",
            d.energy_mj, d.avg_power_mw, d.soc_initial, d.soc_final
        );
        if let Some(p) = d.attack_avg_power_mw {
            let _ = writeln!(
                o,
                "  since first response {:.3} mW, {:.0}x sleep",
                p,
                d.amplification.unwrap_or(0.0)
            );
        }
        if d.ramping_onset_s.is_some() || d.death_s.is_some() {
            let _ = writeln!(
                o,
                "  ramping onset {}, death {}, drain time {}",
                opt(d.ramping_onset_s, hours),
                opt(d.death_s, hours),
                opt(d.drain_time_s, hours)
            );
        }
        let _ = writeln!(
            o,
            "  shutdowns {}, reboots {}, longest awake {:.2} s, reports {}, suppressed {}",
            d.shutdowns, d.reboots, d.max_awake_episode_s, d.reports, d.suppressed
        );
    }
    let c = &r.controller;
    let _ = writeln!(
        o,
        "\ncontroller: {} alarms, suppressed alarms: {}, {} alerts received, denied for {} over {} episodes",
        c.alarms,
        c.suppressed_alarms,
        c.alerts_received,
        hours(c.denied_s),
        c.dos_episodes
    );
    if let Some(a) = &r.attacker {
        let _ = writeln!(
            o,
            "attacker: {} {}; {} frames sent, {} responses counted",
            a.strategy,
            if a.started { "ran" } else { "never started" },
            a.frames_sent,
            a.responses_seen
        );
        for (i, p) in a.ranking.iter().enumerate() {
            let _ = writeln!(
                o,
                "  #{} {:#04x}: ramping after {}, initial rate {}/min, {:.0} m away",
                i + 1,
                p.target,
                opt(p.time_to_ramping_s, hours),
                p.initial_rate_per_min
                    .map_or_else(|| "-".into(), |n| n.to_string()),
                p.distance_m
            );
        }
    }
    let list: Vec<String> = r
        .alert_counts
        .iter()
        .map(|(k, n)| format!("{n} {k}"))
        .collect();
    let _ = writeln!(
        o,
        "alerts: {}",
        if list.is_empty() { "none".into() } else { list.join(", ") }
    );
    let anchors = anchors(r);
    if !anchors.is_empty() {
        let _ = writeln!(o, "\nreference figures:");
        for a in anchors {
            let _ = writeln!(
                o,
                "  [{}] {}: {} (reference: {})",
                if a.matched { "match" } else { "miss" },
                a.label,
                a.measured,
                a.reference
            );
        }
    }
    o
}
