//! Discharge-loss-recovery (DLR) aggregation of energy-limited device fleets.

pub mod dispatch;
pub mod dlr;
pub mod error;
pub mod fleet;
pub mod hierarchy;
pub mod io;
pub mod pwl;
pub mod trace;

pub use dlr::{DlrPacket, Reservation, Violation};
pub use error::{DlrError, Result};
pub use fleet::{Device, Efficiency, FleetState, StaircaseSignal};
pub use pwl::{EpCurve, MonotoneCurve, SlopeSegment};

/// Absolute tolerance for curve and feasibility comparisons.
pub const TOL: f64 = 1e-9;
