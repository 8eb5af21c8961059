//! Energy-optimal deceleration planning for P2 electrified powertrains.
//!
//! Given preview information about an upcoming deceleration event (gap to the
//! stop line, time available, target speed, road grade, signal timing) the
//! planner computes the deceleration speed profile that maximises recuperated
//! braking energy. The [`simroute`] module closes the loop over a full route
//! and [`v2i`] splits planning into a separate service process.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod constraints;
pub mod decel_model;
pub mod envelope;
pub mod error;
pub mod events;
pub mod export;
pub mod planner;
pub mod powertrain;
pub mod route;
pub mod simroute;
pub mod v2i;

pub use constraints::StageBounds;
pub use decel_model::{DecelCurve, ShapeParams};
pub use envelope::{BrakingObservation, BrakingRecord, Envelope};
pub use error::{Error, Result};
pub use events::{EventDecision, Phase, SpatState};
pub use planner::{DecelPlanRequest, PlanResult, PlannerConfig, SpeedProfile};
pub use powertrain::{ForceBreakdown, VehicleParams};
pub use route::{Route, SignalLight};
pub use simroute::{SimConfig, SimResult};

/// Gravitational acceleration used for grade forces, m/s².
pub const GRAVITY: f64 = 9.81;
