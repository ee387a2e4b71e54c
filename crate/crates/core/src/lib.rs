//! Deterministic discrete-event simulator for battery-drain and
//! denial-of-service attacks on Z-Wave home-security networks.

pub mod attacker;
pub mod battery;
pub mod codec;
pub mod defense;
pub mod device;
pub mod engine;
pub mod presets;
pub mod report;
pub mod scalar;
pub mod scenario;
pub mod sim;

pub use scalar::Scalar;

pub type Battery = battery::KineticBattery<f64>;
pub type BatteryParameters = battery::BatteryParameters<f64>;
pub type SupplyMonitor = battery::SupplyMonitor<f64>;
