//! Two-well kinetic battery with a polarization branch.
//!
//! Charge sits in an available well (fraction `c` of capacity) and a bound
//! well. Load is drawn from the available well only; charge diffuses from the
//! bound well at a rate proportional to the head difference. The open-circuit
//! voltage follows the available-well head, so a battery under heavy load
//! sags quickly and recovers at rest. An RC branch adds a seconds-scale
//! polarization drop on top of the ohmic one.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct BatteryParameters<T> {
    pub capacity_mah: T,
    /// Fraction of capacity in the available well.
    pub available_fraction: T,
    /// Relaxation rate of the head difference between the wells, 1/s.
    pub diffusion_rate: T,
    /// Ohmic resistance of a full cell.
    pub r0_ohm: T,
    /// Relative growth of the ohmic resistance from full to empty.
    pub r_growth: T,
    pub polarization_ohm: T,
    pub polarization_tau_s: T,
    /// (head fraction, volts), ascending in head fraction.
    pub voc_curve: Vec<(T, T)>,
    pub cutoff_v: T,
    pub recovery_v: T,
    /// Conversion voltage between power and current.
    pub nominal_v: T,
}

impl<T: Scalar> BatteryParameters<T> {
    pub fn coin_cell_pair(capacity_mah: f64) -> Self {
        let curve = [
            (0.0, 1.0),
            (0.03, 1.9),
            (0.08, 2.0),
            (0.30, 2.035),
            (0.33, 2.07),
            (0.34, 2.12),
            (1.0, 2.9),
        ];
        BatteryParameters {
            capacity_mah: T::lit(capacity_mah),
            available_fraction: T::lit(0.3),
            diffusion_rate: T::lit(2.8e-7),
            r0_ohm: T::lit(6.0),
            r_growth: T::lit(1.0),
            polarization_ohm: T::lit(24.0),
            polarization_tau_s: T::lit(6.0),
            voc_curve: curve.iter().map(|&(x, v)| (T::lit(x), T::lit(v))).collect(),
            cutoff_v: T::lit(1.7),
            recovery_v: T::lit(2.0),
            nominal_v: T::lit(3.0),
        }
    }

    pub fn current_ma(&self, power_mw: T) -> T {
        power_mw / self.nominal_v
    }
}

/// Piecewise-linear interpolation, clamped at both ends.
pub fn interpolate<T: Scalar>(x: T, points: &[(T, T)]) -> T {
    let Some(&(x0, y0)) = points.first() else {
        return T::zero();
    };
    if x <= x0 {
        return y0;
    }
    for w in points.windows(2) {
        let (xa, ya) = w[0];
        let (xb, yb) = w[1];
        if x <= xb {
            return ya + (yb - ya) * (x - xa) / (xb - xa);
        }
    }
    points[points.len() - 1].1
}

#[derive(Debug, Clone, PartialEq)]
pub struct KineticBattery<T> {
    params: BatteryParameters<T>,
    /// Total charge left in both wells, mAh.
    total: T,
    /// Bound head minus available head, mAh of capacity-equivalent head.
    delta: T,
    /// Voltage across the polarization branch.
    vp: T,
}

impl<T: Scalar> KineticBattery<T> {
    /// A rested battery at the given state of charge.
    pub fn new(params: BatteryParameters<T>, soc: T) -> Self {
        let soc = soc.max(T::zero()).min(T::one());
        KineticBattery {
            total: soc * params.capacity_mah,
            params,
            delta: T::zero(),
            vp: T::zero(),
        }
    }

    pub fn params(&self) -> &BatteryParameters<T> {
        &self.params
    }

    pub fn available_charge(&self) -> T {
        self.params.available_fraction * self.available_head()
    }

    pub fn bound_charge(&self) -> T {
        self.total - self.available_charge()
    }

    pub fn total_charge(&self) -> T {
        self.total
    }

    pub fn state_of_charge(&self) -> T {
        self.total / self.params.capacity_mah
    }

    fn available_head(&self) -> T {
        self.total - (T::one() - self.params.available_fraction) * self.delta
    }

    pub fn open_circuit_voltage(&self) -> T {
        let head = self.available_head() / self.params.capacity_mah;
        interpolate(head, &self.params.voc_curve)
    }

    pub fn internal_resistance(&self) -> T {
        let p = &self.params;
        p.r0_ohm * (T::one() + p.r_growth * (T::one() - self.state_of_charge()))
    }

    pub fn polarization_v(&self) -> T {
        self.vp
    }

    /// Draws `current_ma` for `dt_s` seconds and returns the charge actually
    /// delivered in mAh. Delivery stops short when the available well empties.
    pub fn step(&mut self, current_ma: T, dt_s: T) -> T {
        if dt_s <= T::zero() {
            return T::zero();
        }
        let p = &self.params;
        let c = p.available_fraction;
        let k = p.diffusion_rate;
        let i = current_ma.max(T::zero()) / T::lit(3600.0);
        // one_minus_e = 1 - exp(-k dt), computed without cancellation
        let one_minus_e = -(-k * dt_s).exp_m1();
        let e = T::one() - one_minus_e;
        let relax = one_minus_e / k;

        let rest_head = self.total - (T::one() - c) * self.delta * e;
        let per_unit = dt_s + (T::one() - c) * relax / c;
        let i = if rest_head - i * per_unit < T::zero() {
            rest_head.max(T::zero()) / per_unit
        } else {
            i
        };

        let delivered = i * dt_s;
        self.total = self.total - delivered;
        self.delta = self.delta * e + i / c * relax;

        let current_ma = i * T::lit(3600.0);
        let v_inf = current_ma * p.polarization_ohm / T::lit(1000.0);
        let decay = (-dt_s / p.polarization_tau_s).exp();
        self.vp = v_inf + (self.vp - v_inf) * decay;
        delivered
    }

    /// Terminal voltage under `load_ma`.
    pub fn terminal_voltage(&self, load_ma: T) -> T {
        self.open_circuit_voltage()
            - load_ma.max(T::zero()) * self.internal_resistance() / T::lit(1000.0)
            - self.vp
    }
}

/// Terminal voltage of `battery` under a load current in mA.
pub fn battery_voltage<T: Scalar>(battery: &KineticBattery<T>, load_ma: T) -> T {
    battery.terminal_voltage(load_ma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum SupplyState {
    Operable,
    Shutdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum SupplyTransition {
    Shutdown,
    Reboot,
}

/// Brown-out detector with hysteresis: cuts out below the cutoff under load,
/// comes back only once the resting voltage reaches the recovery level.
#[derive(Debug, Clone, PartialEq)]
pub struct SupplyMonitor<T> {
    pub state: SupplyState,
    pub cutoff_v: T,
    pub recovery_v: T,
}

impl<T: Scalar> SupplyMonitor<T> {
    pub fn new(cutoff_v: T, recovery_v: T) -> Self {
        SupplyMonitor {
            state: SupplyState::Operable,
            cutoff_v,
            recovery_v,
        }
    }

    pub fn update(&mut self, loaded_v: T, resting_v: T) -> Option<SupplyTransition> {
        match self.state {
            SupplyState::Operable if loaded_v < self.cutoff_v => {
                self.state = SupplyState::Shutdown;
                Some(SupplyTransition::Shutdown)
            }
            SupplyState::Shutdown if resting_v >= self.recovery_v => {
                self.state = SupplyState::Operable;
                Some(SupplyTransition::Reboot)
            }
            _ => None,
        }
    }
}
