//! Default discrete-time dispatch.
//!
//! Each step with a constant request is served by water-filling: a common target level `z`
//! is found so that devices above it drain towards it, capped at full power for the step.
//! The same kernel serves recharging in time-to-charge coordinates. Because every device
//! computes its own input from the broadcast level alone, the level is all a coordinator has
//! to send.

use serde::{Deserialize, Serialize};

use crate::dlr::Reservation;
use crate::error::{DlrError, Result};
use crate::fleet::{Device, Efficiency, FleetState, StaircaseSignal};
use crate::TOL;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Discharge,
    Recharge,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Discharge => "discharge",
            Mode::Recharge => "recharge",
        }
    }
}

/// A group of identical devices as seen by the water-filling kernel: total power rating and
/// current level (time-to-go when discharging, time-to-charge when recharging).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelGroup {
    pub rate: f64,
    pub level: f64,
}

/// Power drawn from one device (or group) for broadcast level `z`.
pub fn device_response(rate: f64, level: f64, z: f64, dt: f64) -> f64 {
    rate * ((level - z) / dt).clamp(0.0, 1.0)
}

/// Energy delivered over one step for target level `z`.
pub fn step_energy(groups: &[LevelGroup], z: f64, dt: f64) -> f64 {
    groups
        .iter()
        .map(|g| g.rate * (g.level - z).clamp(0.0, dt))
        .sum()
}

/// Solves `sum_i rate_i * clamp(level_i - z, 0, dt) = energy` for the smallest `z >= 0`.
///
/// The left side is piecewise linear and non-increasing in `z` with breakpoints at `level_i`
/// and `level_i - dt`, so the root is found by locating its bracketing breakpoints and
/// interpolating. A zero request returns the highest level. If the request exceeds what the
/// step can deliver by more than `tol`, the deliverable energy is returned as the error.
pub fn fill_level(
    groups: &[LevelGroup],
    energy: f64,
    dt: f64,
    tol: f64,
) -> std::result::Result<f64, f64> {
    let top = groups.iter().map(|g| g.level).fold(0.0, f64::max);
    if energy <= 0.0 {
        return Ok(top);
    }
    let available = step_energy(groups, 0.0, dt);
    if energy > available + tol {
        return Err(available);
    }
    let mut breaks: Vec<f64> = groups
        .iter()
        .flat_map(|g| [g.level, g.level - dt])
        .filter(|&b| b > 0.0)
        .collect();
    breaks.push(0.0);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let k = breaks.partition_point(|&b| step_energy(groups, b, dt) > energy);
    if k == 0 {
        return Ok(0.0);
    }
    if k == breaks.len() {
        // Only reachable through rounding: every breakpoint still delivers more.
        return Ok(top);
    }
    let (z0, z1) = (breaks[k - 1], breaks[k]);
    let (f0, f1) = (step_energy(groups, z0, dt), step_energy(groups, z1, dt));
    Ok((z0 + (f0 - energy) / (f0 - f1) * (z1 - z0)).clamp(z0, z1))
}

fn discharge_groups(fleet: &FleetState) -> Vec<LevelGroup> {
    fleet
        .devices()
        .iter()
        .map(|d| LevelGroup {
            rate: d.p_discharge_max(),
            level: d.time_to_go(),
        })
        .collect()
}

fn recharge_groups(fleet: &FleetState) -> Vec<LevelGroup> {
    fleet
        .devices()
        .iter()
        .map(|d| LevelGroup {
            rate: d.p_charge_max(),
            level: d.time_to_charge(),
        })
        .collect()
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(DlrError::InvalidSignal(format!(
            "step length must be positive, got {dt}"
        )));
    }
    Ok(())
}

/// Target time-to-go `z` for a constant discharge request `pd` over `dt` hours.
pub fn solve_z_hat(fleet: &FleetState, pd: f64, dt: f64) -> Result<f64> {
    solve_z_hat_with_tol(fleet, pd, dt, TOL)
}

pub fn solve_z_hat_with_tol(fleet: &FleetState, pd: f64, dt: f64, tol: f64) -> Result<f64> {
    check_dt(dt)?;
    if pd.is_nan() || pd < 0.0 {
        return Err(DlrError::NegativePower(pd));
    }
    fill_level(&discharge_groups(fleet), pd * dt, dt, tol).map_err(|available| {
        DlrError::InfeasibleStep {
            step: 0,
            requested: pd * dt,
            available,
        }
    })
}

/// Per-device discharge inputs for a broadcast level.
pub fn discharge_inputs(fleet: &FleetState, z_hat: f64, dt: f64) -> Vec<f64> {
    fleet
        .devices()
        .iter()
        .map(|d| device_response(d.p_discharge_max(), d.time_to_go(), z_hat, dt))
        .collect()
}

/// Target time-to-charge `y` for a constant recharge request `pr <= 0` over `dt` hours.
pub fn solve_y_hat(fleet: &FleetState, pr: f64, dt: f64) -> Result<f64> {
    solve_y_hat_with_tol(fleet, pr, dt, TOL)
}

pub fn solve_y_hat_with_tol(fleet: &FleetState, pr: f64, dt: f64, tol: f64) -> Result<f64> {
    check_dt(dt)?;
    if pr.is_nan() || pr > 0.0 {
        return Err(DlrError::InvalidSignal(format!(
            "recharge request must be non-positive, got {pr}"
        )));
    }
    fill_level(&recharge_groups(fleet), -pr * dt, dt, tol).map_err(|available| {
        DlrError::InfeasibleStep {
            step: 0,
            requested: -pr * dt,
            available,
        }
    })
}

/// Per-device recharge inputs (non-positive) for a broadcast level.
pub fn recharge_inputs(fleet: &FleetState, y_hat: f64, dt: f64) -> Vec<f64> {
    fleet
        .devices()
        .iter()
        .map(|d| match d.eta() {
            Efficiency::Finite(_) => -device_response(d.p_charge_max(), d.time_to_charge(), y_hat, dt),
            Efficiency::NoRecovery => 0.0,
        })
        .collect()
}

/// State after applying input `u` for `dt` hours: discharge drains `u dt`, recharge stores
/// `eta |u| dt`.
pub(crate) fn apply_input(d: &Device, u: f64, dt: f64) -> Device {
    let delta = match d.eta() {
        _ if u >= 0.0 => -u * dt,
        Efficiency::Finite(eta) => -u * dt * eta,
        Efficiency::NoRecovery => 0.0,
    };
    d.with_energy(d.energy() + delta)
}

fn apply_inputs(fleet: &mut FleetState, inputs: &[f64], dt: f64) {
    for (d, &u) in fleet.devices_mut().iter_mut().zip(inputs) {
        *d = apply_input(d, u, dt);
    }
}

/// One dispatch step and its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchStep {
    pub mode: Mode,
    /// Broadcast level: target time-to-go when discharging, time-to-charge when recharging [h].
    pub z_hat: f64,
    /// Requested power, positive for discharge and negative for recharge [MW].
    pub p_request: f64,
    pub per_device_u: Vec<f64>,
}

impl DispatchStep {
    pub fn delivered(&self) -> f64 {
        self.per_device_u.iter().sum()
    }
}

/// Serves one step on `fleet`, updating its state in place.
pub fn step(fleet: &mut FleetState, level: f64, dt: f64, mode: Mode, tol: f64) -> Result<DispatchStep> {
    let (z_hat, inputs) = match mode {
        Mode::Discharge => {
            let z = solve_z_hat_with_tol(fleet, level, dt, tol)?;
            (z, discharge_inputs(fleet, z, dt))
        }
        Mode::Recharge => {
            let y = solve_y_hat_with_tol(fleet, level, dt, tol)?;
            (y, recharge_inputs(fleet, y, dt))
        }
    };
    apply_inputs(fleet, &inputs, dt);
    Ok(DispatchStep {
        mode,
        z_hat,
        p_request: level,
        per_device_u: inputs,
    })
}

/// Record of a simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationLog {
    pub dt: f64,
    pub steps: Vec<DispatchStep>,
    /// Discharge power ratings, to convert time-to-go into energy.
    pub ratings: Vec<f64>,
    pub initial_states: Vec<f64>,
    /// Real time-to-go after each step.
    pub states: Vec<Vec<f64>>,
    pub initial_virtual: Vec<f64>,
    /// Virtual (truncated) time-to-go after each step.
    pub virtual_states: Vec<Vec<f64>>,
    pub total_discharged: f64,
    pub total_recharged: f64,
}

impl SimulationLog {
    pub(crate) fn new(dt: f64, real: &FleetState, virt: &FleetState) -> Self {
        SimulationLog {
            dt,
            steps: Vec::new(),
            ratings: real.devices().iter().map(|d| d.p_discharge_max()).collect(),
            initial_states: real.time_to_go(),
            states: Vec::new(),
            initial_virtual: virt.time_to_go(),
            virtual_states: Vec::new(),
            total_discharged: 0.0,
            total_recharged: 0.0,
        }
    }

    pub(crate) fn record(&mut self, s: DispatchStep, real: Vec<f64>, virt: Vec<f64>) {
        match s.mode {
            Mode::Discharge => self.total_discharged += s.delivered() * self.dt,
            Mode::Recharge => self.total_recharged -= s.delivered() * self.dt,
        }
        self.steps.push(s);
        self.states.push(real);
        self.virtual_states.push(virt);
    }

    pub fn final_states(&self) -> &[f64] {
        self.states.last().unwrap_or(&self.initial_states)
    }

    pub fn final_virtual(&self) -> &[f64] {
        self.virtual_states.last().unwrap_or(&self.initial_virtual)
    }

    /// Largest per-device energy gap between the final and initial real states [MWh].
    pub fn recovery_error(&self) -> f64 {
        self.final_states()
            .iter()
            .zip(&self.initial_states)
            .zip(&self.ratings)
            .map(|((x, x0), p)| (x - x0).abs() * p)
            .fold(0.0, f64::max)
    }

    /// Smallest time-to-go reached by any device during the run.
    pub fn min_state(&self) -> f64 {
        self.states
            .iter()
            .flatten()
            .chain(&self.initial_states)
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

pub(crate) fn tag_step(e: DlrError, step: usize) -> DlrError {
    match e {
        DlrError::InfeasibleStep {
            requested,
            available,
            ..
        } => DlrError::InfeasibleStep {
            step,
            requested,
            available,
        },
        other => other,
    }
}

/// Runs the default discharge policy on a pure discharge signal.
///
/// Fails with [`DlrError::InfeasibleStep`] at the first step the fleet cannot serve.
pub fn simulate_discharge(fleet: &FleetState, signal: &StaircaseSignal, tol: f64) -> Result<SimulationLog> {
    if let Some((index, &level)) = signal.levels().iter().enumerate().find(|(_, &l)| l < 0.0) {
        return Err(DlrError::NotDischargeSignal { index, level });
    }
    let mut real = fleet.clone();
    let mut log = SimulationLog::new(signal.dt(), &real, &real);
    for (k, &level) in signal.levels().iter().enumerate() {
        let s = step(&mut real, level, signal.dt(), Mode::Discharge, tol).map_err(|e| tag_step(e, k))?;
        let x = real.time_to_go();
        log.record(s, x.clone(), x);
    }
    Ok(log)
}

/// Executes a reserved discharge-then-recharge cycle.
///
/// Dispatch runs on the truncated virtual fleet `min(x_i, x*)`; the real fleet follows with
/// the same inputs. An admissible cycle empties the virtual fleet and then refills it, so the
/// real fleet ends where it started.
pub fn simulate_cycle(
    fleet: &FleetState,
    reservation: &Reservation,
    signal: &StaircaseSignal,
) -> Result<SimulationLog> {
    simulate_cycle_with_tol(fleet, reservation, signal, TOL)
}

pub fn simulate_cycle_with_tol(
    fleet: &FleetState,
    reservation: &Reservation,
    signal: &StaircaseSignal,
    tol: f64,
) -> Result<SimulationLog> {
    let mut virt = fleet.truncated(reservation.x_star);
    let held = virt.total_energy();
    if (held - reservation.ed).abs() > tol.max(1e-12 * reservation.ed) {
        return Err(DlrError::ReservationViolated(format!(
            "fleet truncated at x* = {} h holds {held} MWh, reservation is for {} MWh",
            reservation.x_star, reservation.ed
        )));
    }
    check_cycle_energies(reservation, signal, tol)?;

    let mut real = fleet.clone();
    let mut log = SimulationLog::new(signal.dt(), &real, &virt);
    let start = signal.recharge_start();
    for (k, &level) in signal.levels().iter().enumerate() {
        let mode = if k < start { Mode::Discharge } else { Mode::Recharge };
        let s = step(&mut virt, level, signal.dt(), mode, tol).map_err(|e| tag_step(e, k))?;
        apply_inputs(&mut real, &s.per_device_u, signal.dt());
        log.record(s, real.time_to_go(), virt.time_to_go());
    }
    Ok(log)
}

pub(crate) fn check_cycle_energies(r: &Reservation, signal: &StaircaseSignal, tol: f64) -> Result<()> {
    use crate::dlr::Violation;
    match r.check_cycle_with_tol(signal, tol) {
        Ok(()) | Err(Violation::DischargeNotDominated) => Ok(()),
        Err(v) => Err(DlrError::ReservationViolated(format!("{}: {v}", v.clause()))),
    }
}

/// Grid energy needed to refill a virtual fleet to its truncated level.
pub fn recharge_need(virtual_fleet: &FleetState) -> f64 {
    virtual_fleet
        .devices()
        .iter()
        .map(|d| (d.energy_max() - d.energy()) * d.eta().inverse())
        .sum()
}
