//! Built-in scenarios reproducing the published experiments, plus the
//! control runs and defense demonstrations that go with them.
//!
//! Layout shared by all presets: controller at the origin, sensors a few
//! metres away on the x axis, attacker further out on the same axis.

use crate::defense::{DefensePolicy, SpoofAction};
use crate::scenario::{load_scenario, Scenario};

pub const HOME_ID: u32 = 0xC0FF_EE01;
pub const FOREIGN_HOME_ID: u32 = 0x0BAD_F00D;
pub const CONTACT_ID: u8 = 0x05;
pub const MOTION_ID: u8 = 0x06;

/// Initial charge of the four fig8 runs, highest first.
pub const FIG8_SOCS: [f64; 4] = [0.355, 0.35, 0.345, 0.34];

#[derive(Debug, Clone)]
pub struct Preset {
    pub name: String,
    pub summary: &'static str,
    pub text: String,
}

impl Preset {
    pub fn scenario(&self) -> Scenario {
        load_scenario(&self.text)
            .unwrap_or_else(|e| panic!("preset {} does not load: {e}", self.name))
    }

    /// Presets that stage an attack forging some node's identity.
    pub fn impersonates(&self) -> bool {
        let s = self.scenario();
        match &s.attacker {
            None => false,
            Some(a) => match &a.strategy {
                // frames in a foreign network or from out of range impersonate nobody here
                crate::attacker::AttackStrategy::DosController {
                    foreign_home_id, ..
                } => foreign_home_id.is_none() && a.position.distance(&s.controller.position) <= s.controller.range_m,
                _ => true,
            },
        }
    }

    /// Impersonation the victim can notice: the node whose id is forged
    /// is within its own radio range of the attacker.
    pub fn spoof_overheard(&self) -> bool {
        if !self.impersonates() {
            return false;
        }
        let s = self.scenario();
        let Some(a) = &s.attacker else { return false };
        match &a.strategy {
            crate::attacker::AttackStrategy::DosController { spoof_source, .. } => {
                let victim = match spoof_source {
                    Some(id) => s.device(*id),
                    None => s.devices.iter().min_by_key(|d| d.node_id),
                };
                victim.is_some_and(|d| a.position.distance(&d.position) <= d.range_m)
            }
            // everything else forges the controller's id
            _ => a.position.distance(&s.controller.position) <= s.controller.range_m,
        }
    }
}

fn header(name: &str, duration: &str, sample: &str) -> String {
    format!(
        "[scenario]\nname = {name}\nseed = 20240611\nduration = {duration}\nsample_interval = {sample}\n\n[controller]\nhome_id = {HOME_ID:#010X}\nposition = 0, 0\n"
    )
}

fn contact(id: u8, x: f64, soc: f64, extra: &str) -> String {
    contact_at(id, (x, 0.0), soc, extra)
}

fn contact_at(id: u8, (x, y): (f64, f64), soc: f64, extra: &str) -> String {
    format!("\n[device]\nnode_id = {id:#04x}\nprofile = contact\nposition = {x}, {y}\nsoc = {soc}\n{extra}")
}

fn motion(id: u8, x: f64, extra: &str) -> String {
    format!("\n[device]\nnode_id = {id:#04x}\nprofile = motion\nposition = {x}, 0\n{extra}")
}

fn stimulus(at: &str, target: u8, kind: &str, every: Option<&str>, until: Option<&str>) -> String {
    let mut s = format!("\n[stimulus]\nat = {at}\ntarget = {target:#04x}\nkind = {kind}\n");
    if let Some(e) = every {
        s += &format!("every = {e}\n");
    }
    if let Some(u) = until {
        s += &format!("until = {u}\n");
    }
    s
}

fn attacker(strategy: &str, x: f64, body: &str) -> String {
    format!("\n[attacker]\nstrategy = {strategy}\nposition = {x}, 0\nstart = 10s\n{body}")
}

fn fig6_contact(pps: u32) -> String {
    // attacker 40 m from the sensor; the door opening keeps it awake long enough to hook
    header(&format!("fig6_contact_{pps}pps"), "1h", "1s")
        + &contact(CONTACT_ID, 10.0, 1.0, "")
        + &attacker("drain_wakeup", 50.0, &format!("target = {CONTACT_ID:#04x}\npps = {pps}\n"))
        + &stimulus("20s", CONTACT_ID, "door_open", None, None)
}

fn fig6_motion(pps: u32) -> String {
    header(&format!("fig6_motion_{pps}pps"), "1h", "1s")
        + &motion(MOTION_ID, 10.0, "")
        + &attacker("drain_flirs", 50.0, &format!("target = {MOTION_ID:#04x}\npps = {pps}\n"))
}

fn drain(name: &str, sample: &str, extra_device: &str) -> String {
    // heartbeat one minute in hooks the flood that started at 10 s
    header(name, "20h", sample)
        + &contact(CONTACT_ID, 10.0, 1.0, &format!("heartbeat_phase = 1min\n{extra_device}"))
        + &attacker("drain_wakeup", 50.0, &format!("target = {CONTACT_ID:#04x}\npps = 10\n"))
}

fn fig8(exp: usize, soc: f64) -> String {
    header(&format!("fig8_exp{exp}"), "3h", "1s")
        + &contact(CONTACT_ID, 10.0, soc, "")
        + &attacker(
            "probe",
            50.0,
            &format!("targets = {CONTACT_ID:#04x}\npps = 10\nstop_when_ranked = true\n"),
        )
        + &stimulus("20s", CONTACT_ID, "door_open", None, None)
}

fn dos_controller(name: &str, x: f64, extra: &str) -> String {
    // flood from 10 s to 5 min; sensors report every 30 s before, during and after
    header(name, "10min", "1s")
        + &contact(CONTACT_ID, 10.0, 1.0, "")
        + &motion(MOTION_ID, -10.0, "")
        + &attacker(
            "dos_controller",
            x,
            &format!("pps = 60\nspoof_source = {CONTACT_ID:#04x}\nstop = 5min\n{extra}"),
        )
        + &stimulus("5s", CONTACT_ID, "door_open", None, None)
        + &stimulus("15s", CONTACT_ID, "door_open", Some("30s"), Some("9min"))
        + &stimulus("25s", MOTION_ID, "motion", Some("30s"), Some("9min"))
}

fn dos_motion(rate: u32) -> String {
    let name = if rate == 80 {
        "dos_motion".to_string()
    } else {
        format!("dos_motion_{rate}")
    };
    header(&name, "5min", "1s")
        + &motion(MOTION_ID, 10.0, "")
        + &attacker(
            "dos_motion",
            40.0,
            &format!("target = {MOTION_ID:#04x}\npps = {rate}\nkeepalive_every = 8\nstop = 4min\n"),
        )
        + &stimulus("2s", MOTION_ID, "motion", None, None)
        + &stimulus("15s", MOTION_ID, "motion", Some("10s"), Some("235s"))
        + &stimulus("250s", MOTION_ID, "motion", None, None)
}

fn dos_contact() -> String {
    // a sensor already near ramping; doors open every 7 s through the cycles
    header("dos_contact", "40min", "1s")
        + &contact(CONTACT_ID, 10.0, 0.33, "")
        + &attacker("drain_wakeup", 50.0, &format!("target = {CONTACT_ID:#04x}\npps = 10\n"))
        + &stimulus("20s", CONTACT_ID, "door_open", None, None)
        + &stimulus("27s", CONTACT_ID, "door_open", Some("7s"), None)
}

fn baseline_home() -> String {
    let defenses = "defense = meaningful_timeout 3s, spoof_alert\n";
    header("baseline_home", "24h", "10s").replace(
        "position = 0, 0\n",
        &format!("position = 0, 0\n{defenses}"),
    ) + &contact(CONTACT_ID, 10.0, 1.0, defenses)
        + &motion(MOTION_ID, -10.0, defenses)
        + &contact_at(0x07, (0.0, 12.0), 1.0, defenses)
        + &stimulus("5min", CONTACT_ID, "door_open", Some("47min"), None)
        + &stimulus("9min", MOTION_ID, "motion", Some("13min"), None)
        + &stimulus("1h", 0x07, "door_open", Some("3h"), None)
        + &stimulus("30min", MOTION_ID, "command", Some("2h"), None)
        + &stimulus("2h", CONTACT_ID, "queue", Some("6h"), None)
}

fn probe_home() -> String {
    let mut s = header("probe_home", "4h", "1s");
    let ids = [0x05u8, 0x07, 0x08, 0x09];
    for (i, (&id, soc)) in ids.iter().zip([0.45, 0.4, 0.37, 0.355]).enumerate() {
        s += &contact(id, 5.0 + 5.0 * i as f64, soc, "");
        s += &stimulus("20s", id, "door_open", None, None);
    }
    s + &attacker(
        "probe",
        45.0,
        "targets = 0x05, 0x07, 0x08, 0x09\npps = 10\nstop_when_ranked = true\n",
    )
}

/// Every preset, in display order.
pub fn all() -> Vec<Preset> {
    let mut v = Vec::new();
    let mut push = |name: &str, summary: &'static str, text: String| {
        v.push(Preset {
            name: name.to_string(),
            summary,
            text,
        })
    };
    push("fig6_contact", "contact sensor drained at 10 PPS, one hour", fig6_contact(10).replace("fig6_contact_10pps", "fig6_contact"));
    for pps in [2, 10, 50, 100] {
        push(&format!("fig6_contact_{pps}pps"), "contact sensor drain at a fixed packet rate", fig6_contact(pps));
    }
    push("fig6_motion", "motion sensor drained at 10 PPS with beams, one hour", fig6_motion(10).replace("fig6_motion_10pps", "fig6_motion"));
    for pps in [2, 10] {
        push(&format!("fig6_motion_{pps}pps"), "motion sensor drain at a fixed packet rate", fig6_motion(pps));
    }
    push(
        "fig6_idle_contact",
        "contact sensor left alone for an hour",
        header("fig6_idle_contact", "1h", "1s") + &contact(CONTACT_ID, 10.0, 1.0, ""),
    );
    push(
        "fig6_idle_motion",
        "motion sensor left alone for an hour",
        header("fig6_idle_motion", "1h", "1s") + &motion(MOTION_ID, 10.0, ""),
    );
    push("drain", "fresh contact sensor drained to death at 10 PPS", drain("drain", "10s", ""));
    push("fig7a", "full drain with per-second response counts", drain("fig7a", "1s", ""));
    push(
        "fig7b",
        "ramping close up: drop and recovery cycles",
        header("fig7b", "10min", "100ms")
            + &contact(CONTACT_ID, 10.0, 0.33, "")
            + &attacker("drain_wakeup", 50.0, &format!("target = {CONTACT_ID:#04x}\npps = 10\n"))
            + &stimulus("20s", CONTACT_ID, "door_open", None, None),
    );
    for (i, soc) in FIG8_SOCS.iter().enumerate() {
        push(&format!("fig8_exp{}", i + 1), "time-to-ramping probe at one charge level", fig8(i + 1, *soc));
    }
    push("probe_home", "probe four sensors at once and rank the weakest", probe_home());
    push("dos_controller", "controller flooded at 60 PPS while sensors report", dos_controller("dos_controller", 40.0, ""));
    push(
        "dos_controller_foreign",
        "same flood under a foreign home id",
        dos_controller("dos_controller_foreign", 40.0, &format!("foreign_home_id = {FOREIGN_HOME_ID:#010X}\n")),
    );
    push("dos_controller_100m", "flood from the edge of controller range", dos_controller("dos_controller_100m", 100.0, ""));
    push("dos_controller_101m", "flood from just beyond controller range", dos_controller("dos_controller_101m", 101.0, ""));
    push("dos_motion", "motion sensor held awake and flooded at 80 messages/s", dos_motion(80));
    push("dos_motion_79", "same at 79 messages/s, just under the sensing cutoff", dos_motion(79));
    push("dos_contact", "door openings during a ramping contact sensor", dos_contact());
    push(
        "defense_timeout",
        "drain preset with the meaningful-packet timeout",
        drain("defense_timeout", "10s", "defense = meaningful_timeout 3s\n"),
    );
    push("defense_spoof", "controller flood against sensors that check for their own id", {
        let s = dos_controller("defense_spoof", 40.0, "");
        with_defense_text(&s, "spoof_alert")
    });
    push("baseline_home", "attack-free day with commands and both defenses", baseline_home());
    v
}

fn with_defense_text(text: &str, defense: &str) -> String {
    text.replace("profile = contact\n", &format!("profile = contact\ndefense = {defense}\n"))
        .replace("profile = motion\n", &format!("profile = motion\ndefense = {defense}\n"))
        .replace(
            &format!("home_id = {HOME_ID:#010X}\nposition = 0, 0\n"),
            &format!("home_id = {HOME_ID:#010X}\nposition = 0, 0\ndefense = {defense}\n"),
        )
}

pub fn find(name: &str) -> Option<Preset> {
    all().into_iter().find(|p| p.name == name)
}

/// Presets whose name starts with `prefix`, e.g. `fig8` or `dos_controller`.
pub fn group(prefix: &str) -> Vec<Preset> {
    if let Some(p) = find(prefix) {
        return vec![p];
    }
    all().into_iter().filter(|p| p.name.starts_with(prefix)).collect()
}

/// Adds a policy to the controller and every device that lacks one of its kind.
pub fn add_defense(s: &mut Scenario, policy: DefensePolicy) {
    let same = |p: &DefensePolicy| std::mem::discriminant(p) == std::mem::discriminant(&policy);
    if !s.controller.defenses.iter().any(same) {
        s.controller.defenses.push(policy);
    }
    for d in &mut s.devices {
        if !d.defenses.iter().any(same) {
            d.defenses.push(policy);
        }
    }
}

pub fn spoof_alert() -> DefensePolicy {
    DefensePolicy::SpoofDetection {
        action: SpoofAction::AlertUser,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_loads_and_round_trips() {
        let all = all();
        assert!(all.len() >= 25);
        for p in &all {
            let s = p.scenario();
            assert_eq!(s.name, p.name);
            assert_eq!(load_scenario(&s.to_string()).unwrap(), s, "{}", p.name);
        }
    }

    #[test]
    fn names_are_unique() {
        let mut names: Vec<String> = all().into_iter().map(|p| p.name).collect();
        names.sort();
        let n = names.len();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn groups() {
        assert_eq!(group("fig8").len(), 4);
        assert_eq!(group("fig6_contact").len(), 1);
        assert!(group("nothing").is_empty());
    }

    #[test]
    fn fig6_contact_geometry() {
        let s = find("fig6_contact").unwrap().scenario();
        let a = s.attacker.as_ref().unwrap();
        assert_eq!(a.position.distance(&s.devices[0].position), 40.0);
    }

    #[test]
    fn impersonation_classification() {
        assert!(find("dos_controller").unwrap().impersonates());
        assert!(find("drain").unwrap().impersonates());
        assert!(!find("dos_controller_foreign").unwrap().impersonates());
        assert!(!find("dos_controller_101m").unwrap().impersonates());
        assert!(!find("baseline_home").unwrap().impersonates());
    }
}
