//! Discharge-loss-recovery packets.
//!
//! A [`DlrPacket`] carries three curves: the discharge capacity curve, the loss curve (grid
//! energy needed to refill the truncated fleet, against the truncation level `x*`) and the
//! recovery curve (minimum refill time against `x*`). Packets add up exactly, so a fleet's
//! packet can be built device by device or sub-fleet by sub-fleet in any order.
//!
//! A [`Reservation`] fixes the discharge energy `Ed`. From it follow `x*`, the recharge
//! energy `Er`, the minimum recharge time `y*` and the truncated capacity curve that every
//! discharge request must respect.

use serde::{Deserialize, Serialize};

use crate::error::{DlrError, Result};
use crate::fleet::{Device, FleetState, StaircaseSignal};
use crate::pwl::monotone::remove_collinear;
use crate::pwl::{EpCurve, MonotoneCurve, SlopeSegment};
use crate::TOL;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlrPacket {
    pub discharge: EpCurve,
    pub loss: MonotoneCurve,
    pub recovery: MonotoneCurve,
    pub n_devices: usize,
}

impl Default for DlrPacket {
    fn default() -> Self {
        DlrPacket::empty()
    }
}

impl DlrPacket {
    /// Identity element of [`DlrPacket::aggregate`].
    pub fn empty() -> Self {
        DlrPacket {
            discharge: EpCurve::zero(),
            loss: MonotoneCurve::zero(),
            recovery: MonotoneCurve::zero(),
            n_devices: 0,
        }
    }

    /// Packet of a single unit: a straight discharge line and two straight ramps.
    pub fn from_device(d: &Device) -> Self {
        let x = d.time_to_go();
        let discharge = EpCurve::from_segments(&[SlopeSegment {
            power: d.p_discharge_max(),
            duration: x,
        }]);
        let (loss, recovery) = if x > TOL {
            (
                MonotoneCurve::new(vec![(0.0, 0.0), (x, d.loss_rate() * x)]),
                MonotoneCurve::new(vec![(0.0, 0.0), (x, d.recovery_rate() * x)]),
            )
        } else {
            (Ok(MonotoneCurve::zero()), Ok(MonotoneCurve::zero()))
        };
        DlrPacket {
            discharge,
            loss: loss.expect("ramp through the origin is a valid curve"),
            recovery: recovery.expect("ramp through the origin is a valid curve"),
            n_devices: 1,
        }
    }

    /// Packet of a whole fleet, built directly from the device list.
    pub fn from_fleet(fleet: &FleetState) -> Self {
        let devices: Vec<&Device> = fleet
            .devices()
            .iter()
            .filter(|d| d.time_to_go() > TOL)
            .collect();
        DlrPacket {
            discharge: fleet.capacity(),
            loss: loss_curve(&devices),
            recovery: recovery_curve(&devices),
            n_devices: fleet.len(),
        }
    }

    /// Combines two packets: Minkowski sum of the discharge curves, pointwise sum of the
    /// loss curves and pointwise maximum of the recovery curves.
    pub fn aggregate(&self, other: &DlrPacket) -> DlrPacket {
        DlrPacket {
            discharge: self.discharge.minkowski_add(&other.discharge),
            loss: self.loss.add(&other.loss),
            recovery: self.recovery.max(&other.recovery),
            n_devices: self.n_devices + other.n_devices,
        }
    }

    /// Largest truncation level, `max_i x_i`.
    pub fn x_star_max(&self) -> f64 {
        -self.discharge.initial_slope()
    }

    /// Number of scalars needed to transmit the packet's vertices.
    pub fn scalar_count(&self) -> usize {
        2 * (self.discharge.vertices().len()
            + self.loss.vertices().len()
            + self.recovery.vertices().len())
    }

    /// Truncation level `x*` at which the fleet holds exactly `ed`:
    /// `sum_i p_i * min(x_i, x*) = ed`, read off the discharge curve's segments.
    pub fn x_star(&self, ed: f64) -> Result<f64> {
        check_energy(ed, self.discharge.total_energy())?;
        Ok(x_star_from_segments(&self.discharge.to_segments(), ed))
    }

    /// Reserves `ed` MWh of discharge energy.
    pub fn reserve(&self, ed: f64) -> Result<Reservation> {
        let x_star = self.x_star(ed)?;
        let ed = ed.clamp(0.0, self.discharge.total_energy());
        Ok(Reservation {
            ed,
            x_star,
            er: self.loss.eval_unchecked(x_star),
            y_star: self.recovery.eval_unchecked(x_star),
            truncated_capacity: self.discharge.convex_hull_truncate(ed)?,
        })
    }
}

fn check_energy(ed: f64, available: f64) -> Result<()> {
    if ed.is_nan() || ed < -TOL {
        return Err(DlrError::NegativeEnergy(ed));
    }
    if ed > available + TOL {
        return Err(DlrError::EnergyExceedsFleet {
            requested: ed,
            available,
        });
    }
    Ok(())
}

/// Inverts the piecewise-linear map `x* -> sum_k power_k * min(duration_k, x*)`.
pub(crate) fn x_star_from_segments(segments: &[SlopeSegment], ed: f64) -> f64 {
    let mut segs: Vec<SlopeSegment> = segments.to_vec();
    segs.sort_by(|a, b| a.duration.total_cmp(&b.duration));
    let mut saturated = 0.0; // energy of segments already below x*
    let mut active: f64 = segs.iter().map(|s| s.power).sum();
    let mut last = 0.0;
    for s in &segs {
        if active <= 0.0 {
            break;
        }
        let at_knee = saturated + active * s.duration;
        if ed <= at_knee {
            return ((ed - saturated) / active).clamp(last, s.duration);
        }
        saturated += s.energy();
        active -= s.power;
        last = s.duration;
    }
    last
}

/// Loss curve `Er(x*) = sum_i (p_i / eta_i) * min(x_i, x*)`, with a vertex at every distinct
/// time-to-go.
fn loss_curve(devices: &[&Device]) -> MonotoneCurve {
    if devices.is_empty() {
        return MonotoneCurve::zero();
    }
    let mut sorted: Vec<(f64, f64)> = devices
        .iter()
        .map(|d| (d.time_to_go(), d.loss_rate()))
        .collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut pts = vec![(0.0, 0.0)];
    let mut saturated = 0.0;
    let mut active: f64 = sorted.iter().map(|d| d.1).sum();
    let mut i = 0;
    while i < sorted.len() {
        let knee = sorted[i].0;
        // Devices within the tolerance of this knee saturate together.
        while i < sorted.len() && sorted[i].0 - knee <= TOL {
            saturated += sorted[i].1 * sorted[i].0;
            active -= sorted[i].1;
            i += 1;
        }
        pts.push((knee, saturated + active.max(0.0) * knee));
    }
    MonotoneCurve::new(remove_collinear(pts)).expect("loss curve is monotone")
}

/// Recovery curve `y*(x*) = max_i r_i * min(x_i, x*)` with `r_i = p_i / (eta_i * p_charge_i)`.
///
/// Sweeps the knees in increasing order. Between two knees the envelope is the larger of the
/// plateau left by saturated devices and the steepest ramp still rising, so each interval adds
/// at most one crossing vertex.
fn recovery_curve(devices: &[&Device]) -> MonotoneCurve {
    if devices.is_empty() {
        return MonotoneCurve::zero();
    }
    let mut sorted: Vec<(f64, f64)> = devices
        .iter()
        .map(|d| (d.time_to_go(), d.recovery_rate()))
        .collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    // suffix_rate[k] = steepest ramp among devices k.. (still rising past sorted[k-1].0)
    let mut suffix_rate = vec![0.0f64; n + 1];
    for k in (0..n).rev() {
        suffix_rate[k] = suffix_rate[k + 1].max(sorted[k].1);
    }

    let mut pts = vec![(0.0, 0.0)];
    let mut plateau: f64 = 0.0;
    let mut start = 0.0;
    let mut i = 0;
    while i < n {
        let knee = sorted[i].0;
        let slope = suffix_rate[i];
        if slope * start < plateau && slope * knee > plateau {
            let cross = plateau / slope;
            if cross - start > TOL && knee - cross > TOL {
                pts.push((cross, plateau));
            }
        }
        pts.push((knee, plateau.max(slope * knee)));
        while i < n && sorted[i].0 - knee <= TOL {
            plateau = plateau.max(sorted[i].1 * sorted[i].0);
            i += 1;
        }
        start = knee;
    }
    MonotoneCurve::new(remove_collinear(pts)).expect("recovery curve is monotone")
}

/// A reserved discharge energy and everything derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reservation {
    /// Reserved discharge energy [MWh].
    pub ed: f64,
    /// Truncation level [h].
    pub x_star: f64,
    /// Grid energy needed to refill the truncated fleet [MWh].
    pub er: f64,
    /// Minimum recharge time [h].
    pub y_star: f64,
    pub truncated_capacity: EpCurve,
}

/// Which admissibility clause a round-trip signal violates.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// A discharge level follows a recharge level.
    NotRoundTrip { index: usize },
    /// The discharge part is not dominated by the truncated capacity curve.
    DischargeNotDominated,
    DischargeEnergy { expected: f64, actual: f64 },
    RechargeEnergy { expected: f64, actual: f64 },
    RechargeRate { index: usize, level: f64, bound: f64 },
}

impl Violation {
    pub fn clause(&self) -> &'static str {
        match self {
            Violation::NotRoundTrip { .. } => "not_round_trip",
            Violation::DischargeNotDominated => "discharge_not_dominated",
            Violation::DischargeEnergy { .. } => "discharge_energy",
            Violation::RechargeEnergy { .. } => "recharge_energy",
            Violation::RechargeRate { .. } => "recharge_rate",
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::NotRoundTrip { index } => {
                write!(f, "discharge level at step {index} follows a recharge level")
            }
            Violation::DischargeNotDominated => {
                write!(f, "discharge E-p transform exceeds the truncated capacity curve")
            }
            Violation::DischargeEnergy { expected, actual } => {
                write!(f, "discharge energy {actual} MWh differs from reserved {expected} MWh")
            }
            Violation::RechargeEnergy { expected, actual } => {
                write!(f, "recharge energy {actual} MWh differs from required {expected} MWh")
            }
            Violation::RechargeRate { index, level, bound } => write!(
                f,
                "recharge level {level} MW at step {index} exceeds the rate bound {bound} MW"
            ),
        }
    }
}

impl Reservation {
    /// Recharge virtual battery `(power rating, energy)` = `(Er / y*, Er)`.
    pub fn recharge_virtual_battery(&self) -> (f64, f64) {
        if self.er <= TOL || self.y_star <= TOL {
            return (0.0, 0.0);
        }
        (self.er / self.y_star, self.er)
    }

    /// Checks a discharge-then-recharge signal against the reservation.
    pub fn check_cycle(&self, signal: &StaircaseSignal) -> std::result::Result<(), Violation> {
        self.check_cycle_with_tol(signal, TOL)
    }

    pub fn check_cycle_with_tol(
        &self,
        signal: &StaircaseSignal,
        tol: f64,
    ) -> std::result::Result<(), Violation> {
        let start = signal.recharge_start();
        if let Some(k) = signal.levels()[start..].iter().position(|&l| l > 0.0) {
            return Err(Violation::NotRoundTrip { index: start + k });
        }
        let discharge = signal.discharge_part();
        let ep = discharge
            .ep_transform()
            .expect("discharge part has no negative levels");
        if !self.truncated_capacity.dominates_with_tol(&ep, tol) {
            return Err(Violation::DischargeNotDominated);
        }
        let ed = discharge.energy();
        if (ed - self.ed).abs() > tol {
            return Err(Violation::DischargeEnergy {
                expected: self.ed,
                actual: ed,
            });
        }
        let er = -signal.recharge_part().energy();
        if (er - self.er).abs() > tol {
            return Err(Violation::RechargeEnergy {
                expected: self.er,
                actual: er,
            });
        }
        let (bound, _) = self.recharge_virtual_battery();
        for (k, &l) in signal.levels()[start..].iter().enumerate() {
            if -l > bound + tol {
                return Err(Violation::RechargeRate {
                    index: start + k,
                    level: l,
                    bound,
                });
            }
        }
        Ok(())
    }

    pub fn is_cycle_admissible(&self, signal: &StaircaseSignal) -> bool {
        self.check_cycle(signal).is_ok()
    }

    /// Partial use after discharging: the recharge energy shrinks to what the truncated fleet
    /// actually needs while the recovery time `y*` is kept.
    pub fn with_recharge_energy(&self, er: f64) -> Result<Reservation> {
        if er.is_nan() || er < -TOL {
            return Err(DlrError::NegativeEnergy(er));
        }
        if er > self.er + TOL {
            return Err(DlrError::ReservationViolated(format!(
                "recharge energy {er} MWh exceeds the reserved {} MWh",
                self.er
            )));
        }
        Ok(Reservation {
            er: er.clamp(0.0, self.er),
            ..self.clone()
        })
    }

    /// Partial use before delivery: a smaller discharge energy, with every derived quantity
    /// recomputed from the packet.
    pub fn with_discharge_energy(&self, packet: &DlrPacket, ed: f64) -> Result<Reservation> {
        if ed > self.ed + TOL {
            return Err(DlrError::ReservationViolated(format!(
                "discharge energy can only shrink: {ed} MWh > {} MWh",
                self.ed
            )));
        }
        packet.reserve(ed)
    }
}
