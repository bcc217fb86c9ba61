//! Device model, state coordinates and capacity curves.
//!
//! A device discharges at most `p_discharge_max` and charges at most `p_charge_max` (both
//! measured at the grid connection). Stored energy is tracked as extractable energy `e`, so
//! discharging `u` MW for `dt` hours removes `u * dt` while charging `u` MW adds `eta * u * dt`.

use serde::{Deserialize, Serialize};

use crate::error::{DlrError, Result};
use crate::pwl::{EpCurve, SlopeSegment};
use crate::TOL;

/// Round-trip efficiency. `NoRecovery` models pure demand turn-down, which never needs
/// recharging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Efficiency {
    Finite(f64),
    NoRecovery,
}

impl Efficiency {
    /// `1 / eta`, zero when no recovery is needed.
    pub fn inverse(self) -> f64 {
        match self {
            Efficiency::Finite(eta) => 1.0 / eta,
            Efficiency::NoRecovery => 0.0,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Efficiency::Finite(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Device {
    p_discharge_max: f64,
    p_charge_max: f64,
    eta: Efficiency,
    energy: f64,
    energy_max: f64,
    demand_response: bool,
}

impl Device {
    /// Device given by extractable energy and capacity.
    pub fn from_energy(
        p_discharge_max: f64,
        energy: f64,
        energy_max: f64,
        p_charge_max: f64,
        eta: Efficiency,
    ) -> Result<Self> {
        Device {
            p_discharge_max,
            p_charge_max,
            eta,
            energy,
            energy_max,
            demand_response: false,
        }
        .validated()
    }

    /// Fully charged device given by its time-to-go, as in the parameter tuple `(p, x, p_charge, eta)`.
    pub fn from_time_to_go(
        p_discharge_max: f64,
        time_to_go: f64,
        p_charge_max: f64,
        eta: Efficiency,
    ) -> Result<Self> {
        let e = p_discharge_max * time_to_go;
        Device::from_energy(p_discharge_max, e, e, p_charge_max, eta)
    }

    /// Demand-response virtual unit. Unlike a battery it may have `eta > 1` (incomplete
    /// recovery) or [`Efficiency::NoRecovery`] (pure turn-down).
    pub fn demand_response(
        p_discharge_max: f64,
        energy: f64,
        energy_max: f64,
        p_charge_max: f64,
        eta: Efficiency,
    ) -> Result<Self> {
        Device {
            p_discharge_max,
            p_charge_max,
            eta,
            energy,
            energy_max,
            demand_response: true,
        }
        .validated()
    }

    fn validated(mut self) -> Result<Self> {
        let bad = |m: String| Err(DlrError::InvalidDevice(m));
        if !(self.p_discharge_max.is_finite() && self.p_discharge_max > 0.0) {
            return bad(format!(
                "discharge power must be positive, got {}",
                self.p_discharge_max
            ));
        }
        if !(self.p_charge_max.is_finite() && self.p_charge_max > 0.0) {
            return bad(format!(
                "charge power must be positive, got {}",
                self.p_charge_max
            ));
        }
        if !(self.energy_max.is_finite() && self.energy_max >= 0.0) {
            return bad(format!("energy capacity must be non-negative, got {}", self.energy_max));
        }
        if !self.energy.is_finite() || self.energy < -TOL || self.energy > self.energy_max + TOL {
            return bad(format!(
                "energy {} outside [0, {}]",
                self.energy, self.energy_max
            ));
        }
        self.energy = self.energy.clamp(0.0, self.energy_max);
        match self.eta {
            Efficiency::Finite(eta) if !(eta.is_finite() && eta > 0.0) => {
                return bad(format!("efficiency must be positive, got {eta}"));
            }
            Efficiency::Finite(eta) if eta > 1.0 && !self.demand_response => {
                return bad(format!(
                    "efficiency {eta} > 1 is only allowed for demand-response units"
                ));
            }
            Efficiency::NoRecovery if !self.demand_response => {
                return bad("infinite efficiency is only allowed for demand-response units".into());
            }
            _ => {}
        }
        Ok(self)
    }

    pub fn p_discharge_max(&self) -> f64 {
        self.p_discharge_max
    }

    pub fn p_charge_max(&self) -> f64 {
        self.p_charge_max
    }

    pub fn eta(&self) -> Efficiency {
        self.eta
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn energy_max(&self) -> f64 {
        self.energy_max
    }

    pub fn is_demand_response(&self) -> bool {
        self.demand_response
    }

    /// Hours the device can discharge at full power from its current state.
    pub fn time_to_go(&self) -> f64 {
        self.energy / self.p_discharge_max
    }

    pub fn max_time_to_go(&self) -> f64 {
        self.energy_max / self.p_discharge_max
    }

    /// Hours needed to refill at full charge power, accounting for losses.
    pub fn time_to_charge(&self) -> f64 {
        match self.eta {
            Efficiency::Finite(eta) => (self.energy_max - self.energy) / (eta * self.p_charge_max),
            Efficiency::NoRecovery => 0.0,
        }
    }

    /// Grid energy needed to recharge one hour of discharge at full power: `p / eta`.
    pub fn loss_rate(&self) -> f64 {
        self.p_discharge_max * self.eta.inverse()
    }

    /// Recharge hours per hour of full-power discharge: `p / (eta * p_charge)`.
    pub fn recovery_rate(&self) -> f64 {
        self.loss_rate() / self.p_charge_max
    }

    /// Same device with a new extractable energy (clamped into `[0, energy_max]`).
    pub(crate) fn with_energy(&self, energy: f64) -> Device {
        Device {
            energy: energy.clamp(0.0, self.energy_max),
            ..*self
        }
    }

    /// Virtual device holding `min(x, x_star)` hours and treated as full at that level.
    pub fn truncated(&self, x_star: f64) -> Device {
        let e = self.p_discharge_max * self.time_to_go().min(x_star.max(0.0));
        Device {
            energy: e,
            energy_max: e,
            ..*self
        }
    }
}

/// A collection of devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetState {
    devices: Vec<Device>,
}

impl FleetState {
    pub fn new(devices: Vec<Device>) -> Result<Self> {
        if devices.is_empty() {
            return Err(DlrError::InvalidDevice("fleet has no devices".into()));
        }
        Ok(FleetState { devices })
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub(crate) fn devices_mut(&mut self) -> &mut [Device] {
        &mut self.devices
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn time_to_go(&self) -> Vec<f64> {
        self.devices.iter().map(Device::time_to_go).collect()
    }

    pub fn total_energy(&self) -> f64 {
        self.devices.iter().map(Device::energy).sum()
    }

    /// Truncated virtual fleet `x_i -> min(x_i, x_star)`.
    pub fn truncated(&self, x_star: f64) -> FleetState {
        FleetState {
            devices: self.devices.iter().map(|d| d.truncated(x_star)).collect(),
        }
    }

    /// Discharge capacity curve: E-p transform of the worst-case request the fleet can meet.
    pub fn capacity(&self) -> EpCurve {
        let segs: Vec<SlopeSegment> = self
            .devices
            .iter()
            .map(|d| SlopeSegment {
                power: d.p_discharge_max,
                duration: d.time_to_go(),
            })
            .collect();
        EpCurve::from_segments(&segs)
    }

    /// Capacity curve in recharge coordinates: charge power ratings against time-to-charge.
    pub fn recharge_capacity(&self) -> EpCurve {
        let segs: Vec<SlopeSegment> = self
            .devices
            .iter()
            .filter(|d| d.eta.is_finite())
            .map(|d| SlopeSegment {
                power: d.p_charge_max,
                duration: d.time_to_charge(),
            })
            .collect();
        EpCurve::from_segments(&segs)
    }

    /// Property 1 check: the signal's E-p transform is dominated by the capacity curve.
    pub fn is_feasible(&self, signal: &StaircaseSignal) -> Result<bool> {
        self.is_feasible_with_tol(signal, TOL)
    }

    pub fn is_feasible_with_tol(&self, signal: &StaircaseSignal, tol: f64) -> Result<bool> {
        Ok(self.capacity().dominates_with_tol(&signal.ep_transform()?, tol))
    }
}

/// Piecewise-constant power request over uniform steps of `dt` hours.
/// Positive levels discharge, negative levels recharge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaircaseSignal {
    dt: f64,
    levels: Vec<f64>,
}

impl StaircaseSignal {
    pub fn new(dt: f64, levels: Vec<f64>) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(DlrError::InvalidSignal(format!(
                "step length must be positive, got {dt}"
            )));
        }
        if let Some(i) = levels.iter().position(|l| !l.is_finite()) {
            return Err(DlrError::InvalidSignal(format!("level {i} is not finite")));
        }
        Ok(StaircaseSignal { dt, levels })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Index of the first negative level; everything before it is the discharge phase.
    pub fn recharge_start(&self) -> usize {
        self.levels
            .iter()
            .position(|&l| l < 0.0)
            .unwrap_or(self.levels.len())
    }

    /// `true` if no positive level follows a negative one.
    pub fn is_round_trip(&self) -> bool {
        self.levels[self.recharge_start()..].iter().all(|&l| l <= 0.0)
    }

    pub fn discharge_part(&self) -> StaircaseSignal {
        StaircaseSignal {
            dt: self.dt,
            levels: self.levels[..self.recharge_start()].to_vec(),
        }
    }

    pub fn recharge_part(&self) -> StaircaseSignal {
        StaircaseSignal {
            dt: self.dt,
            levels: self.levels[self.recharge_start()..].to_vec(),
        }
    }

    /// Net energy `dt * sum(levels)`.
    pub fn energy(&self) -> f64 {
        self.dt * self.levels.iter().sum::<f64>()
    }

    /// Exact E-p transform `E(p) = dt * sum(max(level - p, 0))`, with vertices at the
    /// distinct levels.
    pub fn ep_transform(&self) -> Result<EpCurve> {
        if let Some((index, &level)) = self.levels.iter().enumerate().find(|(_, &l)| l < 0.0) {
            return Err(DlrError::NotDischargeSignal { index, level });
        }
        let mut sorted: Vec<f64> = self.levels.iter().copied().filter(|&l| l > 0.0).collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted.is_empty() {
            return Ok(EpCurve::zero());
        }
        // For a breakpoint p equal to the k-th largest level, the levels strictly above p are
        // the first k; E(p) = dt * (sum of those - k * p).
        let mut vertices = Vec::with_capacity(sorted.len() + 1);
        vertices.push((sorted[0], 0.0));
        let mut above = 0.0;
        for k in 1..sorted.len() {
            above += sorted[k - 1];
            let p = sorted[k];
            if p < sorted[k - 1] {
                vertices.push((p, self.dt * (above - k as f64 * p)));
            }
        }
        above += sorted[sorted.len() - 1];
        vertices.push((0.0, self.dt * above));
        vertices.reverse();
        EpCurve::new(vertices)
    }
}
